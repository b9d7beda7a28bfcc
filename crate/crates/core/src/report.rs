//! Network runs and their machine-readable reports.
//!
//! `stats` mode evaluates the closed-form model only. `functional` mode pushes
//! seeded random data through the array simulator layer by layer and checks
//! every layer against the golden reference. `both` does both and also
//! requires the simulator's counters to equal the model.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{run_layer, ArrayCase, LayerRun};
use crate::error::{Result, TmaError};
use crate::golden::{fc_quantized_ref, quantized_ref};
use crate::mapper::{
    cycle_model, effective_gmacs, fps, network_peak_gmacs, plan_network, sram_traffic_model,
    CycleStats, ExecutionPlan, ModelOptions, TrafficModel,
};
use crate::memsys::{AccessCounters, Region, SramModel, PSUM_BYTES, SRAM_CAPACITY};
use crate::network::{LayerKind, LayerSpec, NetworkSpec};
use crate::psiquant::{decompose_tensor, PrecisionMode};
use crate::tensor::Tensor;

pub const DEFAULT_FREQ_MHZ: f64 = 250.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Functional,
    Stats,
    Both,
}

impl RunMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "functional" => Some(Self::Functional),
            "stats" => Some(Self::Stats),
            "both" => Some(Self::Both),
            _ => None,
        }
    }

    fn simulates(self) -> bool {
        self != RunMode::Stats
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Some(Self::Json),
            "csv" => Some(Self::Csv),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub mode: RunMode,
    /// Overrides every layer's precision.
    pub precision: Option<PrecisionMode>,
    pub freq_mhz: f64,
    pub seed: u64,
    pub model: ModelOptions,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: RunMode::Stats,
            precision: None,
            freq_mhz: DEFAULT_FREQ_MHZ,
            seed: 0,
            model: ModelOptions::default(),
        }
    }
}

/// Array-side SRAM traffic of one layer in bytes (reads + writes).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SramBytes {
    pub input: u64,
    pub weights: u64,
    pub bias: u64,
    pub psum: u64,
    pub output: u64,
}

impl SramBytes {
    pub fn total(&self) -> u64 {
        self.input + self.weights + self.bias + self.psum + self.output
    }

    fn add(&mut self, o: &SramBytes) {
        self.input += o.input;
        self.weights += o.weights;
        self.bias += o.bias;
        self.psum += o.psum;
        self.output += o.output;
    }

    /// Activations and weights are bytes, biases and Psums 4 bytes, outputs
    /// 1 byte after ReLU and 4 without.
    pub fn from_model(layer: &LayerSpec, t: &TrafficModel) -> Self {
        let outputs = layer.output_dims().len() as u64;
        Self {
            input: t.input_reads,
            weights: t.weight_reads,
            bias: 4 * t.bias_reads,
            psum: PSUM_BYTES as u64 * (t.psum_stores - outputs + t.psum_loads),
            output: t.output_writes * if layer.post.relu { 1 } else { 4 },
        }
    }

    fn from_counters(c: &AccessCounters, input: Region, layer_index: usize) -> Self {
        let psum = c.region(Region::PsumOfLayer(layer_index));
        Self {
            input: c.region(input).read_bytes,
            weights: c.region(Region::Weights).read_bytes,
            bias: c.region(Region::Bias).read_bytes,
            psum: psum.read_bytes + psum.write_bytes,
            output: c.region(Region::Layer(layer_index)).write_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: String,
    pub case: ArrayCase,
    pub precision: PrecisionMode,
    pub cycles: CycleStats,
    pub macs: u64,
    pub effective_gmacs: f64,
    pub psum_stores: u64,
    pub psum_loads: u64,
    pub sram_bytes: SramBytes,
    pub fifo_feedback: u64,
    /// Functional runs only.
    pub overflow18: Option<u64>,
    /// Functional runs only; a mismatch aborts the run instead.
    pub bit_exact: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub cycles: CycleStats,
    pub macs: u64,
    pub psum_stores: u64,
    pub psum_loads: u64,
    pub sram_bytes: SramBytes,
    pub frames_per_s: f64,
    pub peak_gmacs: f64,
    pub effective_gmacs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub network: String,
    pub mode: RunMode,
    pub freq_mhz: f64,
    pub seed: u64,
    pub layers: Vec<LayerRow>,
    pub totals: Totals,
    pub assumptions: Vec<String>,
}

impl RunReport {
    pub fn layer(&self, name: &str) -> Option<&LayerRow> {
        self.layers.iter().find(|l| l.layer == name)
    }
}

/// Cycle-accounting choices that a frame rate depends on.
pub fn model_assumptions(opts: &ModelOptions) -> Vec<String> {
    let load = if opts.weight_load_cycles == 0 {
        "weight loads overlap streaming (0 cycles each; events still counted)".to_string()
    } else {
        format!("weight loads cost {} cycles each", opts.weight_load_cycles)
    };
    vec![
        "fill: conv sweeps charge (filters_in_group - 1) * group_width drain shifts; FC segments need none".into(),
        load,
        "rows shorter than 12 padded pixels are stretched to 12 shift slots".into(),
        "INT8: one extra cycle per shift on which any column group emits; FC: one per 12-shift segment".into(),
        "DRAM transfers are not modelled; all data is assumed resident in SRAM".into(),
    ]
}

fn plans_for(net: &NetworkSpec, opts: &RunOptions) -> Result<(NetworkSpec, Vec<ExecutionPlan>)> {
    if !(opts.freq_mhz > 0.0 && opts.freq_mhz.is_finite()) {
        return Err(TmaError::Validation(format!(
            "frequency must be > 0 MHz, got {}",
            opts.freq_mhz
        )));
    }
    let net = match opts.precision {
        Some(m) => net.clone().with_precision(m),
        None => net.clone(),
    };
    let plans = plan_network(&net)?;
    Ok((net, plans))
}

fn model_row(plan: &ExecutionPlan, opts: &RunOptions) -> LayerRow {
    let cycles = cycle_model(plan, &opts.model);
    let t = sram_traffic_model(plan);
    let macs = plan.layer.macs();
    LayerRow {
        layer: plan.layer.name.clone(),
        case: plan.config.case,
        precision: plan.config.mode,
        cycles,
        macs,
        effective_gmacs: effective_gmacs(macs, cycles.total_cycles, opts.freq_mhz),
        psum_stores: t.psum_stores,
        psum_loads: t.psum_loads,
        sram_bytes: SramBytes::from_model(&plan.layer, &t),
        fifo_feedback: t.feedback_pushes,
        overflow18: None,
        bit_exact: None,
    }
}

/// Random weights and biases for layer `index`, independent of other layers.
pub fn layer_params(layer: &LayerSpec, index: usize, seed: u64) -> (Tensor<i32>, Vec<i32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let dims: Vec<usize> = match layer.kind {
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
    // keep biases on the scale of the post-shift output
    let b = 1i32 << (layer.post.requant_shift + 4).min(30);
    let bias = (0..layer.filters).map(|_| rng.gen_range(-b..b)).collect();
    (w, bias)
}

pub fn random_input(net: &NetworkSpec, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..net.input.len()).map(|_| rng.gen()).collect()
}

struct Simulated {
    run: LayerRun,
    counters: AccessCounters,
    input_region: Region,
}

/// Stages one layer in SRAM (the array-side traffic is isolated from the
/// staging writes) and runs it. Capacity grows past the physical SRAM when a
/// layer's weights alone exceed it.
fn simulate(
    layer: &LayerSpec,
    index: usize,
    input: &[i32],
    weights: &Tensor<i32>,
    bias: &[i32],
    opts: &ModelOptions,
) -> Result<Simulated> {
    let input_region = if index == 1 {
        Region::Inputs
    } else {
        Region::Layer(index - 1)
    };
    let out_bytes = if layer.post.relu { 1 } else { 4 };
    let need = input.len()
        + weights.len()
        + 4 * bias.len()
        + PSUM_BYTES * layer.output_dims().len()
        + out_bytes * layer.post_dims().len();
    let mut mem = SramModel::new(need.max(SRAM_CAPACITY));
    mem.add_region(input_region, input.len(), 1)?;
    mem.add_region(Region::Weights, weights.len(), 1)?;
    mem.add_region(Region::Bias, bias.len(), 4)?;
    mem.add_region(Region::PsumOfLayer(index), layer.output_dims().len(), PSUM_BYTES)?;
    mem.add_region(Region::Layer(index), layer.post_dims().len(), out_bytes)?;
    mem.load_from_dram(input_region, 0, input)?;
    mem.load_from_dram(Region::Weights, 0, weights.data())?;
    mem.load_from_dram(Region::Bias, 0, bias)?;
    let staged = mem.counters().clone();
    let run = run_layer(layer, index, input_region, &mut mem, opts)?;
    Ok(Simulated {
        run,
        counters: mem.counters().since(&staged),
        input_region,
    })
}

fn golden_finals(layer: &LayerSpec, input: &[i32], weights: &Tensor<i32>, bias: &[i32]) -> Result<Vec<i32>> {
    let (psi, _) = decompose_tensor(weights, layer.precision)?;
    let x: Vec<u8> = input.iter().map(|&v| v as u8).collect();
    match layer.kind {
        LayerKind::Conv => {
            let d = layer.input;
            let t = Tensor::from_vec(&[d.c, d.h, d.w], x)?;
            Ok(quantized_ref(&t, &psi, bias, &layer.geometry)?.into_data())
        }
        LayerKind::Fc => fc_quantized_ref(&x, &psi, bias),
    }
}

fn check_agreement(plan: &ExecutionPlan, sim: &Simulated, model: &LayerRow) -> Result<()> {
    let input_bytes = sim.counters.region(sim.input_region).read_bytes;
    let mismatch = |what: &str, a: String, b: String| {
        Err(TmaError::Verification(format!(
            "layer '{}': simulated {what} {a} != model {b}",
            plan.layer.name
        )))
    };
    if sim.run.cycles != model.cycles {
        return mismatch("cycles", format!("{:?}", sim.run.cycles), format!("{:?}", model.cycles));
    }
    if (sim.counters.psum_stores, sim.counters.psum_loads) != (model.psum_stores, model.psum_loads) {
        return mismatch(
            "psum stores/loads",
            format!("{}/{}", sim.counters.psum_stores, sim.counters.psum_loads),
            format!("{}/{}", model.psum_stores, model.psum_loads),
        );
    }
    if (input_bytes, sim.run.fifo.feedback_pushes) != (model.sram_bytes.input, model.fifo_feedback) {
        return mismatch(
            "input bytes/feedback",
            format!("{input_bytes}/{}", sim.run.fifo.feedback_pushes),
            format!("{}/{}", model.sram_bytes.input, model.fifo_feedback),
        );
    }
    Ok(())
}

pub fn run(net: &NetworkSpec, opts: &RunOptions) -> Result<RunReport> {
    let (net, plans) = plans_for(net, opts)?;
    let mut layers = Vec::with_capacity(plans.len());
    let mut act: Vec<i32> = if opts.mode.simulates() {
        random_input(&net, opts.seed).into_iter().map(i32::from).collect()
    } else {
        Vec::new()
    };

    for (i, plan) in plans.iter().enumerate() {
        let model = model_row(plan, opts);
        if !opts.mode.simulates() {
            layers.push(model);
            continue;
        }
        let layer = &plan.layer;
        let index = i + 1;
        let in_layer = |e: TmaError| e.in_layer(&layer.name);
        let (w, b) = layer_params(layer, index, opts.seed);
        let sim = simulate(layer, index, &act, &w, &b, &opts.model).map_err(in_layer)?;
        let golden = golden_finals(layer, &act, &w, &b).map_err(in_layer)?;
        if sim.run.finals.data() != golden.as_slice() {
            let at = golden
                .iter()
                .zip(sim.run.finals.data())
                .position(|(a, b)| a != b)
                .unwrap_or(0);
            return Err(TmaError::Verification(format!(
                "layer '{}': output {at} differs from the golden reference",
                layer.name
            )));
        }
        if opts.mode == RunMode::Both {
            check_agreement(plan, &sim, &model)?;
        }
        let cycles = sim.run.cycles;
        layers.push(LayerRow {
            cycles,
            effective_gmacs: effective_gmacs(layer.macs(), cycles.total_cycles, opts.freq_mhz),
            psum_stores: sim.counters.psum_stores,
            psum_loads: sim.counters.psum_loads,
            sram_bytes: SramBytes::from_counters(&sim.counters, sim.input_region, index),
            fifo_feedback: sim.run.fifo.feedback_pushes,
            overflow18: Some(sim.run.overflow18),
            bit_exact: Some(true),
            ..model
        });
        act = sim.run.activations.into_data();
    }

    let mut cycles = CycleStats::default();
    let mut sram = SramBytes::default();
    for l in &layers {
        cycles.add(&l.cycles);
        sram.add(&l.sram_bytes);
    }
    let macs = layers.iter().map(|l| l.macs).sum();
    let totals = Totals {
        cycles,
        macs,
        psum_stores: layers.iter().map(|l| l.psum_stores).sum(),
        psum_loads: layers.iter().map(|l| l.psum_loads).sum(),
        sram_bytes: sram,
        frames_per_s: fps(cycles.total_cycles, opts.freq_mhz),
        peak_gmacs: network_peak_gmacs(&plans, opts.freq_mhz),
        effective_gmacs: effective_gmacs(macs, cycles.total_cycles, opts.freq_mhz),
    };
    Ok(RunReport {
        network: net.name.clone(),
        mode: opts.mode,
        freq_mhz: opts.freq_mhz,
        seed: opts.seed,
        layers,
        totals,
        assumptions: model_assumptions(&opts.model),
    })
}

/// One CSV line. Layer rows leave the network-level columns empty; the
/// closing `total` row fills them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub layer: String,
    pub case: String,
    pub precision: String,
    pub shift_cycles: u64,
    pub fill_cycles: u64,
    pub psi_extra_cycles: u64,
    pub weight_load_events: u64,
    pub weight_load_cycles: u64,
    pub total_cycles: u64,
    pub macs: u64,
    pub effective_gmacs: f64,
    pub psum_stores: u64,
    pub psum_loads: u64,
    pub sram_input_bytes: u64,
    pub sram_weight_bytes: u64,
    pub sram_bias_bytes: u64,
    pub sram_psum_bytes: u64,
    pub sram_output_bytes: u64,
    pub fifo_feedback: Option<u64>,
    pub bit_exact: Option<bool>,
    pub frames_per_s: Option<f64>,
    pub peak_gmacs: Option<f64>,
}

pub fn csv_rows(report: &RunReport) -> Vec<CsvRow> {
    let row = |layer: String, case: String, precision: String, c: &CycleStats, macs: u64, gmacs: f64, st: u64, ld: u64, s: &SramBytes| CsvRow {
        layer,
        case,
        precision,
        shift_cycles: c.shift_cycles,
        fill_cycles: c.fill_cycles,
        psi_extra_cycles: c.psi_extra_cycles,
        weight_load_events: c.weight_load_events,
        weight_load_cycles: c.weight_load_cycles,
        total_cycles: c.total_cycles,
        macs,
        effective_gmacs: gmacs,
        psum_stores: st,
        psum_loads: ld,
        sram_input_bytes: s.input,
        sram_weight_bytes: s.weights,
        sram_bias_bytes: s.bias,
        sram_psum_bytes: s.psum,
        sram_output_bytes: s.output,
        fifo_feedback: None,
        bit_exact: None,
        frames_per_s: None,
        peak_gmacs: None,
    };
    let mut rows: Vec<CsvRow> = report
        .layers
        .iter()
        .map(|l| CsvRow {
            fifo_feedback: Some(l.fifo_feedback),
            bit_exact: l.bit_exact,
            ..row(
                l.layer.clone(),
                l.case.to_string(),
                l.precision.to_string(),
                &l.cycles,
                l.macs,
                l.effective_gmacs,
                l.psum_stores,
                l.psum_loads,
                &l.sram_bytes,
            )
        })
        .collect();
    let t = &report.totals;
    rows.push(CsvRow {
        frames_per_s: Some(t.frames_per_s),
        peak_gmacs: Some(t.peak_gmacs),
        ..row(
            "total".into(),
            String::new(),
            String::new(),
            &t.cycles,
            t.macs,
            t.effective_gmacs,
            t.psum_stores,
            t.psum_loads,
            &t.sram_bytes,
        )
    });
    rows
}

pub fn to_json(report: &RunReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| TmaError::Parse(e.to_string()))
}

pub fn from_json(text: &str) -> Result<RunReport> {
    serde_json::from_str(text).map_err(|e| TmaError::Parse(format!("report: {e}")))
}

pub fn to_csv(report: &RunReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in csv_rows(report) {
        w.serialize(r).map_err(|e| TmaError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| TmaError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| TmaError::Parse(format!("report csv: {e}")))
}

pub fn render(report: &RunReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => to_json(report).map(|mut s| {
            s.push('\n');
            s
        }),
        ReportFormat::Csv => to_csv(report),
    }
}

pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render(report, format)?;
    let mut f = std::fs::File::create(path)
        .map_err(|e| TmaError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes())
        .map_err(|e| TmaError::Io(format!("{}: {e}", path.display())))
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TmaError::Io(format!("{}: {e}", path.display())))?;
    from_json(&text)
}
