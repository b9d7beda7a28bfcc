//! Closed-form execution plan: tiling, cycles and memory traffic per layer.
//!
//! Nothing here runs the array; every count is derived from the layer
//! geometry so it can be checked against the simulator's counters.
//!
//! Conv sweep (one filter group x one depth tile):
//!
//! ```text
//! P       = max(W_padded, 12)                 row period
//! shift   = (H_out - 1) * P + W_padded
//! drain   = (filters_in_group - 1) * group_width
//! extra   = (passes - 1) * |emitting shifts|
//! ```
//!
//! FC: one 12-shift segment per (input tile, output), plus `passes - 1`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::array::{
    configure, ArrayCase, ArrayConfig, RowSource, FC_SHIFTS_PER_TILE, FC_TILE, FIFO_CAPACITY,
    NE_DEPTH, PEAK_MACS, SAM_COLS, SAM_ROWS,
};
use crate::error::{Result, TmaError};
use crate::memsys::{PSUM_BYTES, SRAM_CAPACITY};
use crate::network::{LayerKind, LayerSpec, NetworkSpec};
use crate::psiquant::PrecisionMode;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleStats {
    /// SH_EN cycles while streaming, including bubbles in short rows.
    pub shift_cycles: u64,
    /// Trailing shifts until the last column group has emitted.
    pub fill_cycles: u64,
    /// Second-pass cycles (INT8 only).
    pub psi_extra_cycles: u64,
    pub weight_load_events: u64,
    pub weight_load_cycles: u64,
    pub total_cycles: u64,
}

impl CycleStats {
    pub fn parts_sum(&self) -> u64 {
        self.shift_cycles + self.fill_cycles + self.psi_extra_cycles + self.weight_load_cycles
    }

    pub fn add(&mut self, o: &CycleStats) {
        self.shift_cycles += o.shift_cycles;
        self.fill_cycles += o.fill_cycles;
        self.psi_extra_cycles += o.psi_extra_cycles;
        self.weight_load_events += o.weight_load_events;
        self.weight_load_cycles += o.weight_load_cycles;
        self.total_cycles += o.total_cycles;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelOptions {
    /// Cycles charged per weight-register reload. Reloads are assumed to
    /// overlap streaming unless this is set.
    pub weight_load_cycles: u64,
    /// Flag group outputs that do not fit this signed width.
    pub accumulator_bits: Option<u32>,
}

/// Element counts moved per layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficModel {
    /// Activations read from SRAM into the FIFO bank.
    pub input_reads: u64,
    /// Activations re-queued from the array edge instead of re-read.
    pub feedback_pushes: u64,
    pub weight_reads: u64,
    pub bias_reads: u64,
    pub psum_stores: u64,
    pub psum_loads: u64,
    /// Post-op outputs written to the layer's output region.
    pub output_writes: u64,
}

pub fn peak_gmacs(mode: PrecisionMode, freq_mhz: f64) -> f64 {
    PEAK_MACS as f64 * freq_mhz / 1000.0 / mode.passes() as f64
}

pub fn fps(total_cycles: u64, freq_mhz: f64) -> f64 {
    freq_mhz * 1e6 / total_cycles as f64
}

/// Achieved MAC rate over the frame.
pub fn effective_gmacs(macs: u64, total_cycles: u64, freq_mhz: f64) -> f64 {
    macs as f64 * freq_mhz / 1000.0 / total_cycles as f64
}

/// Outputs emitted on each shift of a sweep (keyed by shift offset).
fn emissions(config: &ArrayConfig, groups: usize, oh: usize, ow: usize, period: usize) -> HashMap<usize, usize> {
    let width = config.case.group_width();
    let mut m = HashMap::new();
    for g in 0..groups {
        for r in 0..oh {
            for j in 0..ow {
                *m.entry(r * period + j * config.h_stride + g * width).or_default() += 1;
            }
        }
    }
    m
}

/// Histogram: Psums delivered on one shift -> number of such shifts.
pub fn psum_step_histogram(plan: &ExecutionPlan) -> BTreeMap<usize, u64> {
    let mut h = BTreeMap::new();
    if plan.layer.kind == LayerKind::Fc {
        h.insert(1, plan.sweeps as u64);
        return h;
    }
    let out = plan.layer.output_dims();
    let mut per_nf: HashMap<usize, BTreeMap<usize, u64>> = HashMap::new();
    for fg in 0..plan.filter_groups {
        let nf = group_filters(plan, fg);
        let sweep = per_nf.entry(nf).or_insert_with(|| {
            let mut s = BTreeMap::new();
            for n in emissions(&plan.config, nf, out.h, out.w, plan.row_period).into_values() {
                *s.entry(n).or_default() += 1;
            }
            s
        });
        for (&n, &count) in sweep.iter() {
            *h.entry(n).or_default() += count * plan.depth_tiles as u64;
        }
    }
    h
}

/// Channels of depth-tile slice `row / rows` present in a tile of `nc` channels.
fn valid_depths(rows: usize, row: usize, nc: usize) -> u64 {
    nc.saturating_sub((row / rows) * NE_DEPTH).min(NE_DEPTH) as u64
}

/// How one layer is tiled onto the array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub layer: LayerSpec,
    pub config: ArrayConfig,
    /// `ceil(C_in / depth_tile)`; 1 for FC.
    pub depth_tiles: usize,
    /// `ceil(K / filters_per_pass)`; one per output neuron for FC.
    pub filter_groups: usize,
    /// Weight-stationary passes over the input: `depth_tiles * filter_groups`
    /// for conv, `fc_tiles * outputs` for FC.
    pub sweeps: usize,
    /// 2304-lane slices of the FC input.
    pub fc_tiles: Option<usize>,
    pub row_period: usize,
}

impl ExecutionPlan {
    /// Depth tiles or FC tiles, whichever applies.
    pub fn tiles(&self) -> usize {
        self.fc_tiles.unwrap_or(self.depth_tiles)
    }

    pub fn outputs(&self) -> u64 {
        self.layer.output_dims().len() as u64
    }
}

pub fn plan_layer(layer: &LayerSpec) -> Result<ExecutionPlan> {
    layer.validate()?;
    let config = configure(layer)?;
    match layer.kind {
        LayerKind::Fc => {
            let tiles = layer.input_len().div_ceil(FC_TILE);
            Ok(ExecutionPlan {
                layer: layer.clone(),
                config,
                depth_tiles: 1,
                filter_groups: layer.filters,
                sweeps: tiles * layer.filters,
                fc_tiles: Some(tiles),
                row_period: SAM_COLS,
            })
        }
        LayerKind::Conv => {
            if layer.input.w > FIFO_CAPACITY {
                return Err(TmaError::Capacity {
                    requested: layer.input.w,
                    capacity: FIFO_CAPACITY,
                });
            }
            let depth_tiles = layer.input.c.div_ceil(config.depth_tile().expect("conv case"));
            let filter_groups = layer.filters.div_ceil(config.filters_per_pass());
            Ok(ExecutionPlan {
                layer: layer.clone(),
                config,
                depth_tiles,
                filter_groups,
                sweeps: depth_tiles * filter_groups,
                fc_tiles: None,
                row_period: layer.geometry.padded_w(layer.input.w).max(SAM_COLS),
            })
        }
    }
}

pub fn plan_network(net: &NetworkSpec) -> Result<Vec<ExecutionPlan>> {
    net.validate()?;
    net.layers
        .iter()
        .map(|l| plan_layer(l).map_err(|e| e.in_layer(&l.name)))
        .collect()
}

/// Filters served by filter group `fg`.
fn group_filters(plan: &ExecutionPlan, fg: usize) -> usize {
    let fpp = plan.config.filters_per_pass();
    fpp.min(plan.layer.filters - fg * fpp)
}

/// Channels in depth tile `t`.
fn tile_channels(plan: &ExecutionPlan, t: usize) -> usize {
    let dt = plan.config.depth_tile().expect("conv case");
    dt.min(plan.layer.input.c - t * dt)
}

pub fn cycle_model(plan: &ExecutionPlan, opts: &ModelOptions) -> CycleStats {
    let passes = plan.config.mode.passes() as u64;
    let sweeps = plan.sweeps as u64;
    let mut c = CycleStats {
        weight_load_events: sweeps,
        weight_load_cycles: sweeps * opts.weight_load_cycles,
        ..CycleStats::default()
    };
    match plan.layer.kind {
        LayerKind::Fc => {
            c.shift_cycles = sweeps * FC_SHIFTS_PER_TILE as u64;
            c.psi_extra_cycles = sweeps * (passes - 1);
        }
        LayerKind::Conv => {
            let g = plan.layer.geometry;
            let out = plan.layer.output_dims();
            let wp = g.padded_w(plan.layer.input.w);
            let per_sweep = ((out.h - 1) * plan.row_period + wp) as u64;
            let width = plan.config.case.group_width();
            let tiles = plan.depth_tiles as u64;
            // only the last group can be partial
            let mut emits_for = HashMap::new();
            for fg in 0..plan.filter_groups {
                let nf = group_filters(plan, fg);
                let emits = *emits_for.entry(nf).or_insert_with(|| {
                    emissions(&plan.config, nf, out.h, out.w, plan.row_period).len() as u64
                });
                c.shift_cycles += tiles * per_sweep;
                c.fill_cycles += tiles * ((nf - 1) * width) as u64;
                c.psi_extra_cycles += tiles * (passes - 1) * emits;
            }
        }
    }
    c.total_cycles = c.parts_sum();
    c
}

/// `(stores, loads)`: every output is stored once per tile and reloaded on
/// every tile but the first.
pub fn psum_traffic_model(plan: &ExecutionPlan) -> (u64, u64) {
    let tiles = plan.tiles() as u64;
    (plan.outputs() * tiles, plan.outputs() * (tiles - 1))
}

pub fn sram_traffic_model(plan: &ExecutionPlan) -> TrafficModel {
    let layer = &plan.layer;
    let (psum_stores, psum_loads) = psum_traffic_model(plan);
    let mut t = TrafficModel {
        psum_stores,
        psum_loads,
        bias_reads: layer.filters as u64,
        output_writes: layer.post_dims().len() as u64,
        ..TrafficModel::default()
    };
    if layer.kind == LayerKind::Fc {
        let n = (layer.input_len() * layer.filters) as u64;
        t.input_reads = n;
        t.weight_reads = n;
        return t;
    }
    let g = layer.geometry;
    let (c, h, w) = (layer.input.c, layer.input.h, layer.input.w);
    let oh = layer.output_dims().h;
    let rows = plan.config.case.group_rows();
    let pad = g.padding as isize;
    let row_ok = |r: usize, i: usize| {
        let y = (r * g.stride_v + i % rows) as isize - pad;
        y >= 0 && y < h as isize
    };
    t.weight_reads = (layer.filters * c * g.kernel_h * g.kernel_w) as u64;
    let groups = plan.filter_groups as u64;
    for tile in 0..plan.depth_tiles {
        let nc = tile_channels(plan, tile);
        for i in 0..SAM_ROWS {
            let depths = valid_depths(rows, i, nc) * w as u64;
            let fresh = plan.config.row_source(i) == RowSource::Sram;
            for r in 0..oh {
                if (r == 0 || fresh) && row_ok(r, i) {
                    t.input_reads += groups * depths;
                }
                // refilled for row r+1 from the data leaving row i + v_stride
                if r + 1 < oh && !fresh && row_ok(r + 1, i) {
                    t.feedback_pushes += groups * depths;
                }
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerThroughput {
    pub layer: String,
    pub case: ArrayCase,
    pub cycles: CycleStats,
    pub macs: u64,
    pub effective_gmacs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub freq_mhz: f64,
    pub layers: Vec<LayerThroughput>,
    pub total_cycles: u64,
    pub total_macs: u64,
    pub frames_per_s: f64,
    pub peak_gmacs: f64,
    pub effective_gmacs: f64,
}

/// Peak rate of a mixed-precision network is quoted for its slowest mode.
pub fn network_peak_gmacs(plans: &[ExecutionPlan], freq_mhz: f64) -> f64 {
    let mode = plans
        .iter()
        .map(|p| p.config.mode)
        .max_by_key(|m| m.passes())
        .unwrap_or(PrecisionMode::Int5);
    peak_gmacs(mode, freq_mhz)
}

pub fn throughput_report(
    plans: &[ExecutionPlan],
    freq_mhz: f64,
    opts: &ModelOptions,
) -> Result<ThroughputReport> {
    if !(freq_mhz > 0.0 && freq_mhz.is_finite()) {
        return Err(TmaError::Validation(format!("frequency must be > 0 MHz, got {freq_mhz}")));
    }
    let layers: Vec<_> = plans
        .iter()
        .map(|p| {
            let cycles = cycle_model(p, opts);
            let macs = p.layer.macs();
            LayerThroughput {
                layer: p.layer.name.clone(),
                case: p.config.case,
                cycles,
                macs,
                effective_gmacs: effective_gmacs(macs, cycles.total_cycles, freq_mhz),
            }
        })
        .collect();
    let total_cycles = layers.iter().map(|l| l.cycles.total_cycles).sum();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    Ok(ThroughputReport {
        freq_mhz,
        total_cycles,
        total_macs,
        frames_per_s: fps(total_cycles, freq_mhz),
        peak_gmacs: network_peak_gmacs(plans, freq_mhz),
        effective_gmacs: effective_gmacs(total_macs, total_cycles, freq_mhz),
        layers,
    })
}

/// SRAM bytes a layer needs when its input, weights, biases, Psums and
/// outputs are resident together.
pub fn sram_footprint(layer: &LayerSpec) -> usize {
    let wt = match layer.kind {
        LayerKind::Conv => {
            layer.filters * layer.input.c * layer.geometry.kernel_h * layer.geometry.kernel_w
        }
        LayerKind::Fc => layer.filters * layer.input_len(),
    };
    layer.input_len()
        + wt
        + 4 * layer.filters
        + PSUM_BYTES * layer.output_dims().len()
        + layer.post_dims().len() * if layer.post.relu { 1 } else { 4 }
}

pub fn fits_sram(layer: &LayerSpec) -> bool {
    sram_footprint(layer) <= SRAM_CAPACITY
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ConvGeometry, FmapDims};

    fn alex(mode: PrecisionMode) -> Vec<CycleStats> {
        plan_network(&NetworkSpec::alexnet().with_precision(mode))
            .unwrap()
            .iter()
            .map(|p| cycle_model(p, &ModelOptions::default()))
            .collect()
    }

    #[test]
    fn int8_to_int5_ratios() {
        let (a, b) = (alex(PrecisionMode::Int5), alex(PrecisionMode::Int8));
        let ratio = |i: usize| b[i].total_cycles as f64 / a[i].total_cycles as f64;
        for i in 1..5 {
            assert!((1.9..=2.1).contains(&ratio(i)), "{i}: {}", ratio(i));
        }
        assert!((1.15..=1.35).contains(&ratio(0)), "{}", ratio(0));
        for i in 5..8 {
            assert!((ratio(i) - 13.0 / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alexnet_tiling() {
        let p = plan_network(&NetworkSpec::alexnet()).unwrap();
        use ArrayCase::*;
        let cases: Vec<_> = p.iter().map(|p| p.config.case).collect();
        assert_eq!(cases, vec![Conv11, Conv5, Conv3, Conv3, Conv3, Fc, Fc, Fc]);
        assert_eq!((p[0].depth_tiles, p[0].filter_groups), (1, 96));
        assert_eq!((p[2].depth_tiles, p[2].filter_groups), (4, 96));
        assert_eq!(p[5].fc_tiles, Some(4));
        for plan in &p {
            let l = &plan.layer;
            if let Some(dt) = plan.config.depth_tile() {
                assert!(plan.depth_tiles * dt >= l.input.c);
            }
            assert!(plan.filter_groups * plan.config.filters_per_pass() >= l.filters);
        }
    }

    #[test]
    fn psum_closed_forms() {
        let l = LayerSpec::conv("c", FmapDims::new(192, 13, 13), 384, ConvGeometry::square(3, 1, 1), PrecisionMode::Int5);
        let p = plan_layer(&l).unwrap();
        assert_eq!(p.depth_tiles, 3);
        assert_eq!(psum_traffic_model(&p).1, 2 * 13 * 13 * 384);
        let fc = plan_layer(&LayerSpec::fc("f", 9216, 4096, PrecisionMode::Int5)).unwrap();
        assert_eq!(psum_traffic_model(&fc).1, 3 * 4096);
        let one = plan_layer(&LayerSpec::conv("c", FmapDims::new(64, 5, 5), 4, ConvGeometry::square(3, 1, 1), PrecisionMode::Int5)).unwrap();
        assert_eq!(psum_traffic_model(&one).1, 0);
    }

    #[test]
    fn peak_rates() {
        assert_eq!(peak_gmacs(PrecisionMode::Int5, 250.0), 576.0);
        assert_eq!(peak_gmacs(PrecisionMode::Int8, 250.0), 288.0);
        assert!(throughput_report(&[], 0.0, &ModelOptions::default()).is_err());
    }

    #[test]
    fn weight_load_cycles_add_up() {
        let l = LayerSpec::conv("c", FmapDims::new(100, 10, 10), 9, ConvGeometry::square(3, 1, 1), PrecisionMode::Int5);
        let p = plan_layer(&l).unwrap();
        let base = cycle_model(&p, &ModelOptions::default());
        let slow = cycle_model(&p, &ModelOptions { weight_load_cycles: 7, accumulator_bits: None });
        assert_eq!(base.weight_load_events, 3 * 2);
        assert_eq!(slow.total_cycles - base.total_cycles, 7 * 6);
    }

    #[test]
    fn wide_rows_rejected() {
        let l = LayerSpec::conv("c", FmapDims::new(1, 4, 300), 1, ConvGeometry::square(3, 1, 1), PrecisionMode::Int5);
        assert!(matches!(plan_layer(&l), Err(TmaError::Capacity { .. })));
    }
}
