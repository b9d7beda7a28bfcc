//! The closed-form mapper and the array simulator must agree counter for counter.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tma_core::array::simulate_layer;
use tma_core::mapper::{cycle_model, plan_layer, psum_step_histogram, sram_traffic_model, ModelOptions};
use tma_core::memsys::Region;
use tma_core::network::{ConvGeometry, FmapDims, LayerSpec};
use tma_core::{PrecisionMode, Tensor};

fn check(layer: &LayerSpec, seed: u64, opts: &ModelOptions) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mode = layer.precision;
    let wlen = match layer.kind {
        tma_core::network::LayerKind::Conv => {
            layer.filters * layer.input.c * layer.geometry.kernel_h * layer.geometry.kernel_w
        }
        tma_core::network::LayerKind::Fc => layer.filters * layer.input_len(),
    };
    let input: Vec<u8> = (0..layer.input_len()).map(|_| rng.gen()).collect();
    let w = Tensor::from_fn(&[wlen], |_| rng.gen_range(mode.weight_range())).unwrap();
    let bias: Vec<i32> = (0..layer.filters).map(|_| rng.gen_range(-99..99)).collect();
    let (run, counters) = simulate_layer(layer, &input, &w, &bias, opts).unwrap();

    let plan = plan_layer(layer).unwrap();
    let model = cycle_model(&plan, opts);
    assert_eq!(run.cycles, model, "{layer:?}");
    assert_eq!(run.cycles.total_cycles, run.cycles.parts_sum());

    let t = sram_traffic_model(&plan);
    assert_eq!(counters.psum_stores, t.psum_stores);
    assert_eq!(counters.psum_loads, t.psum_loads);
    assert_eq!(counters.region(Region::Inputs).reads, t.input_reads);
    assert_eq!(run.fifo.sram_loads, t.input_reads);
    assert_eq!(run.fifo.feedback_pushes, t.feedback_pushes);
    assert_eq!(counters.region(Region::Weights).reads, t.weight_reads);
    assert_eq!(counters.region(Region::Bias).reads, t.bias_reads);
    assert_eq!(counters.region(Region::Layer(1)).writes, t.output_writes);
    assert_eq!(run.psums_per_step, psum_step_histogram(&plan));
    let max_step = *run.psums_per_step.keys().max().unwrap();
    assert!(max_step <= plan.config.psums_per_step());
    let outputs: u64 = run.psums_per_step.iter().map(|(n, c)| *n as u64 * c).sum();
    assert_eq!(outputs, t.psum_stores);
}

fn conv(c: usize, h: usize, w: usize, k: usize, g: ConvGeometry, mode: PrecisionMode) -> LayerSpec {
    LayerSpec::conv("l", FmapDims::new(c, h, w), k, g, mode)
}

#[test]
fn fixed_layers_agree() {
    let opts = ModelOptions::default();
    for mode in PrecisionMode::ALL {
        check(&conv(70, 9, 11, 9, ConvGeometry::square(3, 1, 1), mode), 1, &opts);
        check(&conv(20, 12, 9, 5, ConvGeometry::square(3, 2, 1), mode), 2, &opts);
        check(&conv(40, 10, 10, 3, ConvGeometry::square(5, 1, 2), mode), 3, &opts);
        check(&conv(3, 27, 27, 2, ConvGeometry::square(11, 4, 2), mode), 4, &opts);
        check(&LayerSpec::fc("f", 3000, 3, mode), 5, &opts);
    }
    let slow = ModelOptions {
        weight_load_cycles: 5,
        accumulator_bits: None,
    };
    check(&conv(70, 6, 6, 6, ConvGeometry::square(3, 1, 1), PrecisionMode::Int8), 6, &slow);
    check(&LayerSpec::fc("f", 100, 2, PrecisionMode::Int5), 7, &slow);
}

fn small_geometry() -> impl Strategy<Value = ConvGeometry> {
    (1usize..=11, 1usize..=11, 1usize..=4, 1usize..=4, 0usize..=2).prop_map(|(kh, kw, sv, sh, p)| {
        ConvGeometry {
            kernel_h: kh,
            kernel_w: kw,
            stride_v: sv,
            stride_h: sh,
            padding: p,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_layers_agree(
        g in small_geometry(),
        c in 1usize..80,
        h in 11usize..16,
        w in 11usize..16,
        k in 1usize..6,
        int8 in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mode = if int8 { PrecisionMode::Int8 } else { PrecisionMode::Int5 };
        check(&conv(c, h, w, k, g, mode), seed, &ModelOptions::default());
    }

    #[test]
    fn cycles_monotone(
        g in small_geometry(),
        c in 1usize..200,
        h in 11usize..40,
        w in 11usize..40,
        k in 1usize..20,
        int8 in any::<bool>(),
        which in 0usize..4,
    ) {
        let mode = if int8 { PrecisionMode::Int8 } else { PrecisionMode::Int5 };
        let opts = ModelOptions::default();
        let base = conv(c, h, w, k, g, mode);
        let grown = match which {
            0 => conv(c, h + 1, w, k, g, mode),
            1 => conv(c, h, w + 1, k, g, mode),
            2 => conv(c + 1, h, w, k, g, mode),
            _ => conv(c, h, w, k + 1, g, mode),
        };
        let a = cycle_model(&plan_layer(&base).unwrap(), &opts).total_cycles;
        let b = cycle_model(&plan_layer(&grown).unwrap(), &opts).total_cycles;
        prop_assert!(b >= a, "{a} -> {b}");
    }
}
