//! Self-check suites behind `tma verify`.
//!
//! Each suite returns a [`CheckResult`]; a failing check is a result, not an
//! error. Errors are reserved for setup problems.

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{configure, simulate_layer, ArrayCase};
use crate::datapath::{moa_reduce, MOA18_LOW_WIDTH};
use crate::error::{Result, TmaError};
use crate::golden::{fc_quantized_ref, quantized_ref};
use crate::mapper::{
    cycle_model, peak_gmacs, plan_layer, plan_network, psum_step_histogram, sram_traffic_model,
    ModelOptions,
};
use crate::network::{ConvGeometry, FmapDims, LayerKind, LayerSpec, NetworkSpec};
use crate::psiquant::{decompose_tensor, error_table, worst_case_relative_error, PrecisionMode};
use crate::report::{model_assumptions, run, RunMode, RunOptions};
use crate::tensor::Tensor;

/// Published AlexNet frame rate at 200 MHz, and the accepted deviation.
pub const REFERENCE_FPS: f64 = 62.0;
pub const REFERENCE_FREQ_MHZ: f64 = 200.0;
pub const FPS_TOLERANCE: f64 = 0.25;

pub const SUITES: &[&str] = &[
    "psi-int5",
    "psi-int8",
    "moa",
    "bit-exact",
    "cycle-ratios",
    "peak",
    "psum-traffic",
    "frame-rate",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub moa_cases: usize,
    pub layers_per_case: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            moa_cases: 200_000,
            layers_per_case: 4,
        }
    }
}

/// Layer families exercised by the bit-exactness checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerFamily {
    Conv3,
    Conv3VStride2,
    Conv5,
    Conv11Stride4,
    Fc,
}

impl LayerFamily {
    pub const ALL: [LayerFamily; 5] = [
        LayerFamily::Conv3,
        LayerFamily::Conv3VStride2,
        LayerFamily::Conv5,
        LayerFamily::Conv11Stride4,
        LayerFamily::Fc,
    ];

    pub fn case(self) -> ArrayCase {
        match self {
            LayerFamily::Conv3 | LayerFamily::Conv3VStride2 => ArrayCase::Conv3,
            LayerFamily::Conv5 => ArrayCase::Conv5,
            LayerFamily::Conv11Stride4 => ArrayCase::Conv11,
            LayerFamily::Fc => ArrayCase::Fc,
        }
    }
}

impl std::fmt::Display for LayerFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LayerFamily::Conv3 => "CONV3 s1",
            LayerFamily::Conv3VStride2 => "CONV3 v-stride 2",
            LayerFamily::Conv5 => "CONV5",
            LayerFamily::Conv11Stride4 => "CONV11 s4",
            LayerFamily::Fc => "FC",
        })
    }
}

fn random_dims(rng: &mut impl Rng, min_hw: usize) -> FmapDims {
    FmapDims::new(
        rng.gen_range(1..=128),
        rng.gen_range(min_hw..=32),
        rng.gen_range(min_hw..=32),
    )
}

/// A random layer of the family; conv inputs are at most 32x32x128, FC
/// inputs at most 6000.
pub fn random_layer(family: LayerFamily, mode: PrecisionMode, rng: &mut impl Rng) -> LayerSpec {
    let k = rng.gen_range(1..=9);
    let (input, geometry) = match family {
        LayerFamily::Conv3 => {
            let kk = rng.gen_range(1..=3);
            (random_dims(rng, 4), ConvGeometry::square(kk, 1, rng.gen_range(0..=kk / 2)))
        }
        LayerFamily::Conv3VStride2 => (
            random_dims(rng, 4),
            ConvGeometry {
                kernel_h: 3,
                kernel_w: 3,
                stride_v: 2,
                stride_h: rng.gen_range(1..=2),
                padding: rng.gen_range(0..=1),
            },
        ),
        LayerFamily::Conv5 => {
            let kk = rng.gen_range(4..=5);
            (random_dims(rng, 6), ConvGeometry::square(kk, 1, rng.gen_range(0..=2)))
        }
        LayerFamily::Conv11Stride4 => {
            let d = FmapDims::new(rng.gen_range(1..=24), rng.gen_range(12..=32), rng.gen_range(12..=32));
            (d, ConvGeometry::square(11, 4, rng.gen_range(0..=2)))
        }
        LayerFamily::Fc => {
            let n = rng.gen_range(1..=6000);
            return LayerSpec::fc("fc", n, rng.gen_range(1..=4), mode);
        }
    };
    LayerSpec::conv("conv", input, k, geometry, mode)
}

/// Random weights, biases and input for a layer.
pub fn random_operands(layer: &LayerSpec, rng: &mut impl Rng) -> (Vec<u8>, Tensor<i32>, Vec<i32>) {
    let dims = match layer.kind {
        LayerKind::Conv => vec![
            layer.filters,
            layer.input.c,
            layer.geometry.kernel_h,
            layer.geometry.kernel_w,
        ],
        LayerKind::Fc => vec![layer.filters, layer.input_len()],
    };
    let range = layer.precision.weight_range();
    let w = Tensor::from_fn(&dims, |_| rng.gen_range(range.clone())).expect("rank <= 4");
    let bias = (0..layer.filters).map(|_| rng.gen_range(-50_000..50_000)).collect();
    let x = (0..layer.input_len()).map(|_| rng.gen()).collect();
    (x, w, bias)
}

/// Runs the array and the golden reference on one random instance.
/// Returns `Ok(false)` on a mismatch.
pub fn bit_exact_once(layer: &LayerSpec, rng: &mut impl Rng) -> Result<bool> {
    let (x, w, b) = random_operands(layer, rng);
    let (run, _) = simulate_layer(layer, &x, &w, &b, &ModelOptions::default())?;
    let (psi, _) = decompose_tensor(&w, layer.precision)?;
    let golden = match layer.kind {
        LayerKind::Conv => {
            let d = layer.input;
            let t = Tensor::from_vec(&[d.c, d.h, d.w], x)?;
            quantized_ref(&t, &psi, &b, &layer.geometry)?.into_data()
        }
        LayerKind::Fc => fc_quantized_ref(&x, &psi, &b)?,
    };
    Ok(run.finals.data() == golden.as_slice())
}

fn psi_int5() -> CheckResult {
    let inexact: Vec<_> = error_table(PrecisionMode::Int5)
        .into_iter()
        .filter(|r| !r.is_exact())
        .collect();
    let weights: Vec<i32> = inexact.iter().map(|r| r.weight).collect();
    let worst = worst_case_relative_error(PrecisionMode::Int5);
    let passed = weights == [-13, -11, 11, 13]
        && inexact.iter().all(|r| r.abs_error == 1)
        && worst == Ratio::new(1, 11);
    CheckResult::new(
        "psi-int5",
        passed,
        format!(
            "inexact weights {weights:?}, worst relative error {worst} ({:.2}%)",
            100.0 * *worst.numer() as f64 / *worst.denom() as f64
        ),
    )
}

fn psi_int8() -> CheckResult {
    let inexact = error_table(PrecisionMode::Int8).iter().filter(|r| !r.is_exact()).count();
    CheckResult::new("psi-int8", inexact == 0, format!("{inexact} of 256 weights inexact"))
}

fn moa(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut bad = 0usize;
    let mut total = 0usize;
    // exhaustive: 6 operands, width 2 (values in [-4, 4))
    let mut ops = [0i64; 6];
    for code in 0..8usize.pow(6) {
        let mut c = code;
        for o in ops.iter_mut() {
            *o = (c % 8) as i64 - 4;
            c /= 8;
        }
        total += 1;
        bad += (moa_reduce(&ops, 2)?.sum != ops.iter().sum::<i64>()) as usize;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let lim = 1i64 << MOA18_LOW_WIDTH;
    let mut ops = [0i64; 18];
    for _ in 0..opts.moa_cases {
        for o in ops.iter_mut() {
            *o = rng.gen_range(-lim..lim);
        }
        total += 1;
        bad += (moa_reduce(&ops, MOA18_LOW_WIDTH)?.sum != ops.iter().sum::<i64>()) as usize;
    }
    Ok(CheckResult::new(
        "moa",
        bad == 0,
        format!("{} of {total} sums differ from direct addition", bad),
    ))
}

fn bit_exact(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut failures = Vec::new();
    let mut n = 0;
    for family in LayerFamily::ALL {
        for mode in PrecisionMode::ALL {
            for _ in 0..opts.layers_per_case {
                let layer = random_layer(family, mode, &mut rng);
                n += 1;
                if !bit_exact_once(&layer, &mut rng)? {
                    failures.push(format!("{family} {mode}"));
                }
            }
        }
    }
    Ok(CheckResult::new(
        "bit-exact",
        failures.is_empty(),
        format!("{n} random layers, mismatches: {failures:?}"),
    ))
}

/// `(layer, INT8/INT5 cycle ratio)` for a network.
pub fn cycle_ratios(net: &NetworkSpec) -> Result<Vec<(String, f64)>> {
    let opts = ModelOptions::default();
    let a = plan_network(&net.clone().with_precision(PrecisionMode::Int5))?;
    let b = plan_network(&net.clone().with_precision(PrecisionMode::Int8))?;
    Ok(a.iter()
        .zip(&b)
        .map(|(p5, p8)| {
            let r = cycle_model(p8, &opts).total_cycles as f64 / cycle_model(p5, &opts).total_cycles as f64;
            (p5.layer.name.clone(), r)
        })
        .collect())
}

/// Accepted INT8/INT5 cycle ratio for a layer shape.
pub fn ratio_band(case: ArrayCase, stride_h: usize) -> Option<(f64, f64)> {
    match case {
        ArrayCase::Fc => Some((1.0, 1.10)),
        _ if stride_h == 1 => Some((1.95, 2.05)),
        _ if stride_h == 4 => Some((1.20, 1.30)),
        _ => None,
    }
}

fn cycle_ratio_check() -> Result<CheckResult> {
    let net = NetworkSpec::alexnet();
    let ratios = cycle_ratios(&net)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for (l, (name, r)) in net.layers.iter().zip(&ratios) {
        let case = configure(l)?.case;
        if let Some((lo, hi)) = ratio_band(case, l.geometry.stride_h) {
            ok &= (lo..=hi).contains(r);
            parts.push(format!("{name} {r:.3} in [{lo}, {hi}]"));
        }
    }
    Ok(CheckResult::new("cycle-ratios", ok, parts.join(", ")))
}

fn peak() -> CheckResult {
    let (a, b) = (peak_gmacs(PrecisionMode::Int5, 250.0), peak_gmacs(PrecisionMode::Int8, 250.0));
    CheckResult::new(
        "peak",
        a == 576.0 && b == 288.0,
        format!("250 MHz: {a} GMACS (INT5), {b} GMACS (INT8)"),
    )
}

/// One stride-1 layer per case that is wide and deep enough to fill every
/// column group.
pub fn multiplicity_layers(mode: PrecisionMode) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv("conv3", FmapDims::new(70, 14, 14), 6, ConvGeometry::square(3, 1, 1), mode),
        LayerSpec::conv("conv5", FmapDims::new(40, 14, 14), 3, ConvGeometry::square(5, 1, 2), mode),
        LayerSpec::conv("conv11", FmapDims::new(20, 24, 24), 2, ConvGeometry::square(11, 4, 2), mode),
        LayerSpec::fc("fc", 3000, 3, mode),
    ]
}

fn psum_traffic(opts: &VerifyOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut ok = true;
    let mut parts = Vec::new();
    for mode in PrecisionMode::ALL {
        for layer in multiplicity_layers(mode) {
            let (x, w, b) = random_operands(&layer, &mut rng);
            let (run, counters) = simulate_layer(&layer, &x, &w, &b, &ModelOptions::default())?;
            let plan = plan_layer(&layer)?;
            let t = sram_traffic_model(&plan);
            let max = run.psums_per_step.keys().max().copied().unwrap_or(0);
            let agree = counters.psum_stores == t.psum_stores
                && counters.psum_loads == t.psum_loads
                && run.psums_per_step == psum_step_histogram(&plan);
            ok &= agree && max == plan.config.psums_per_step();
            if mode == PrecisionMode::Int5 {
                parts.push(format!("{} {}/step", plan.config.case, max));
            }
        }
    }
    Ok(CheckResult::new("psum-traffic", ok, parts.join(", ")))
}

/// AlexNet INT8 frames/s at 200 MHz against the published figure.
pub fn frame_rate_check() -> Result<CheckResult> {
    let mut parts = Vec::new();
    let mut measured = 0.0;
    for mode in PrecisionMode::ALL {
        let r = run(
            &NetworkSpec::alexnet(),
            &RunOptions {
                mode: RunMode::Stats,
                precision: Some(mode),
                freq_mhz: REFERENCE_FREQ_MHZ,
                ..RunOptions::default()
            },
        )?;
        parts.push(format!("{mode} {:.1} fps", r.totals.frames_per_s));
        if mode == PrecisionMode::Int8 {
            measured = r.totals.frames_per_s;
        }
    }
    let dev = measured / REFERENCE_FPS - 1.0;
    let passed = dev.abs() <= FPS_TOLERANCE;
    let assumptions = model_assumptions(&ModelOptions::default()).join("; ");
    Ok(CheckResult::new(
        "frame-rate",
        passed,
        format!(
            "{} at {REFERENCE_FREQ_MHZ} MHz; INT8 vs {REFERENCE_FPS} fps: {:+.1}% (tolerance {}%, model-dependent). assumptions: {assumptions}",
            parts.join(", "),
            100.0 * dev,
            100.0 * FPS_TOLERANCE
        ),
    ))
}

pub fn run_suite(name: &str, opts: &VerifyOptions) -> Result<CheckResult> {
    match name {
        "psi-int5" => Ok(psi_int5()),
        "psi-int8" => Ok(psi_int8()),
        "moa" => moa(opts),
        "bit-exact" => bit_exact(opts),
        "cycle-ratios" => cycle_ratio_check(),
        "peak" => Ok(peak()),
        "psum-traffic" => psum_traffic(opts),
        "frame-rate" => frame_rate_check(),
        other => Err(TmaError::Validation(format!(
            "unknown suite '{other}' (known: {})",
            SUITES.join(", ")
        ))),
    }
}

pub fn run_all(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    SUITES.iter().map(|s| run_suite(s, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_pass() {
        let opts = VerifyOptions {
            moa_cases: 1000,
            layers_per_case: 1,
            ..VerifyOptions::default()
        };
        for r in run_all(&opts).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn unknown_suite() {
        assert!(run_suite("nope", &VerifyOptions::default()).is_err());
    }

    #[test]
    fn random_layers_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for f in LayerFamily::ALL {
            for _ in 0..50 {
                let l = random_layer(f, PrecisionMode::Int5, &mut rng);
                l.validate().unwrap();
                assert_eq!(configure(&l).unwrap().case, f.case());
                assert!(l.input_len() <= 32 * 32 * 128);
                if f == LayerFamily::Conv3VStride2 {
                    assert_eq!(l.geometry.stride_v, 2);
                }
            }
        }
    }
}
