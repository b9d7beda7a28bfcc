//! The 4x4x16 NE array and its FIFO bank.
//!
//! Geometry: 4 NE rows x 4 NE columns x 16 depth slices; every NE is 3x3
//! SAMs, so each depth slice is a 12x12 grid of SAM cells. Each of the 12 SAM
//! rows of a slice is one horizontal shift chain of 12 cells fed from its own
//! FIFO (12 x 16 queues). Cell 0 is the input side; values leaving cell 11 are
//! offered back to the FIFO bank for vertical reuse.
//!
//! A configuration splits the grid into row groups (3, 6 or 12 SAM rows, one
//! 16-channel slice of the depth tile each) and column groups (3, 6 or 12
//! cells, one filter each):
//!
//! | case   | rows | cells | filters/pass | depth tile | Psums/step |
//! |--------|------|-------|--------------|------------|------------|
//! | Conv3  | 3    | 3     | 4            | 64         | 4          |
//! | Conv5  | 6    | 6     | 2            | 32         | 2          |
//! | Conv11 | 12   | 12    | 1            | 16         | 1          |
//! | Fc     | 12   | 12    | 1            | 2304 lanes | 1          |
//!
//! Kernels smaller than their group are placed in the top rows and in the
//! cells nearest the input side; the remaining registers hold zero.
//!
//! Inputs stream row by row. Output row `r` occupies `max(W_padded, 12)`
//! shift slots: one per padded pixel, then bubbles if the row is shorter than
//! the 12-cell feedback latency. When the stream advances one output row, FIFO
//! row `i` of a group is refilled from the data leaving row `i + v_stride`;
//! only rows with no such partner load fresh data from SRAM.

#![allow(clippy::needless_range_loop)]

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::datapath::{fits_signed, moa66, ActPair, NeState};
use crate::error::{Result, TmaError};
use crate::mapper::{CycleStats, ModelOptions};
use crate::memsys::{AccessCounters, Region, SramModel, PSUM_BYTES};
use crate::network::{LayerKind, LayerSpec};
use crate::psiquant::{decompose_weight, PrecisionMode, PsiWeight};
use crate::tensor::Tensor;

pub const NE_ROWS: usize = 4;
pub const NE_COLS: usize = 4;
pub const NE_DEPTH: usize = 16;
pub const SAM_ROWS: usize = 3 * NE_ROWS;
pub const SAM_COLS: usize = 3 * NE_COLS;
pub const FIFO_CAPACITY: usize = 224;
/// MAC lanes (SAM cells) in the whole array.
pub const PEAK_MACS: usize = SAM_ROWS * SAM_COLS * NE_DEPTH;
pub const FC_TILE: usize = PEAK_MACS;
/// Shifts for one fully-connected tile to fill the array.
pub const FC_SHIFTS_PER_TILE: usize = SAM_COLS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ArrayCase {
    Conv3,
    Conv5,
    Conv11,
    Fc,
}

impl ArrayCase {
    pub fn group_rows(self) -> usize {
        match self {
            ArrayCase::Conv3 => 3,
            ArrayCase::Conv5 => 6,
            ArrayCase::Conv11 | ArrayCase::Fc => 12,
        }
    }

    pub fn group_width(self) -> usize {
        self.group_rows()
    }

    pub fn row_groups(self) -> usize {
        SAM_ROWS / self.group_rows()
    }

    pub fn column_groups(self) -> usize {
        SAM_COLS / self.group_width()
    }

    pub fn filters_per_pass(self) -> usize {
        self.column_groups()
    }

    /// Input channels per pass; `None` for FC, which tiles the flattened input instead.
    pub fn depth_tile(self) -> Option<usize> {
        match self {
            ArrayCase::Fc => None,
            _ => Some(self.row_groups() * NE_DEPTH),
        }
    }

    pub fn psums_per_step(self) -> usize {
        self.column_groups()
    }

    /// NE rows x NE columns serving one filter.
    pub fn ne_block(self) -> (usize, usize) {
        (self.group_rows() / 3, self.group_width() / 3)
    }
}

impl std::fmt::Display for ArrayCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ArrayCase::Conv3 => "CONV3",
            ArrayCase::Conv5 => "CONV5",
            ArrayCase::Conv11 => "CONV11",
            ArrayCase::Fc => "FC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowSource {
    Sram,
    Feedback { from_row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub case: ArrayCase,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub v_stride: usize,
    pub h_stride: usize,
    pub mode: PrecisionMode,
}

impl ArrayConfig {
    pub fn filters_per_pass(&self) -> usize {
        self.case.filters_per_pass()
    }

    pub fn psums_per_step(&self) -> usize {
        self.case.psums_per_step()
    }

    pub fn depth_tile(&self) -> Option<usize> {
        self.case.depth_tile()
    }

    /// Where FIFO row `row` (0..12) gets its data when the stream advances
    /// one output row.
    pub fn row_source(&self, row: usize) -> RowSource {
        if self.case == ArrayCase::Fc {
            return RowSource::Sram;
        }
        let rows = self.case.group_rows();
        if row % rows + self.v_stride < rows {
            RowSource::Feedback {
                from_row: row + self.v_stride,
            }
        } else {
            RowSource::Sram
        }
    }

    pub fn row_sources(&self) -> [RowSource; SAM_ROWS] {
        std::array::from_fn(|r| self.row_source(r))
    }

    /// Width of the window whose completion triggers an output.
    fn window_w(&self) -> usize {
        match self.case {
            ArrayCase::Fc => SAM_COLS,
            _ => self.kernel_w,
        }
    }
}

pub fn case_for_kernel(kernel_h: usize, kernel_w: usize) -> Result<ArrayCase> {
    match kernel_h.max(kernel_w) {
        0 => Err(TmaError::Unsupported("zero-sized kernel".into())),
        1..=3 => Ok(ArrayCase::Conv3),
        4..=5 => Ok(ArrayCase::Conv5),
        6..=11 => Ok(ArrayCase::Conv11),
        k => Err(TmaError::Unsupported(format!(
            "kernel {kernel_h}x{kernel_w}: largest supported extent is 11, got {k}"
        ))),
    }
}

pub fn configure(layer: &LayerSpec) -> Result<ArrayConfig> {
    match layer.kind {
        LayerKind::Fc => Ok(ArrayConfig {
            case: ArrayCase::Fc,
            kernel_h: SAM_ROWS,
            kernel_w: SAM_COLS,
            v_stride: 1,
            h_stride: 1,
            mode: layer.precision,
        }),
        LayerKind::Conv => {
            let g = &layer.geometry;
            if g.stride_v == 0 || g.stride_h == 0 {
                return Err(TmaError::Unsupported("zero stride".into()));
            }
            Ok(ArrayConfig {
                case: case_for_kernel(g.kernel_h, g.kernel_w)?,
                kernel_h: g.kernel_h,
                kernel_w: g.kernel_w,
                v_stride: g.stride_v,
                h_stride: g.stride_h,
                mode: layer.precision,
            })
        }
    }
}

fn reg_index(row: usize, cell: usize, depth: usize) -> usize {
    (row * SAM_COLS + cell) * NE_DEPTH + depth
}

/// Contents of the weight registers for one pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightPlan {
    regs: Vec<PsiWeight>,
    mapped: Vec<bool>,
    zero_padded: Vec<(usize, usize)>,
    active_groups: usize,
}

impl WeightPlan {
    pub fn weight(&self, row: usize, cell: usize, depth: usize) -> &PsiWeight {
        &self.regs[reg_index(row, cell, depth)]
    }

    /// SAM positions `(row, cell)` inside a filter group but outside the kernel.
    pub fn zero_padded_cells(&self) -> &[(usize, usize)] {
        &self.zero_padded
    }

    /// Registers assigned to a real (filter, channel, tap) or FC input lane.
    pub fn active_lanes(&self) -> usize {
        self.mapped.iter().filter(|m| **m).count()
    }

    pub fn active_groups(&self) -> usize {
        self.active_groups
    }
}

fn padded_cells(config: &ArrayConfig) -> Vec<(usize, usize)> {
    let rows = config.case.group_rows();
    let width = config.case.group_width();
    let mut out = Vec::new();
    for r in 0..SAM_ROWS {
        for c in 0..SAM_COLS {
            if r % rows >= config.kernel_h || c % width >= config.kernel_w {
                out.push((r, c));
            }
        }
    }
    out
}

/// Places a conv filter tile `[F, C_t, kh, kw]` (F <= filters/pass, C_t <=
/// depth tile) into the weight registers.
pub fn load_weights(config: &ArrayConfig, tile: &Tensor<PsiWeight>) -> Result<WeightPlan> {
    let depth_tile = config
        .depth_tile()
        .ok_or_else(|| TmaError::Shape("FC configuration takes load_fc_weights".into()))?;
    let d = tile.dims();
    if d.len() != 4
        || d[0] == 0
        || d[0] > config.filters_per_pass()
        || d[1] > depth_tile
        || d[2] != config.kernel_h
        || d[3] != config.kernel_w
    {
        return Err(TmaError::Shape(format!(
            "{} tile {d:?} does not fit [<= {}, <= {depth_tile}, {}, {}]",
            config.case,
            config.filters_per_pass(),
            config.kernel_h,
            config.kernel_w
        )));
    }
    let (rows, width) = (config.case.group_rows(), config.case.group_width());
    let (kh, kw) = (config.kernel_h, config.kernel_w);
    let mut regs = vec![PsiWeight::zero(config.mode); PEAK_MACS];
    let mut mapped = vec![false; PEAK_MACS];
    for f in 0..d[0] {
        for ch in 0..d[1] {
            let (group_row, depth) = (ch / NE_DEPTH, ch % NE_DEPTH);
            for ky in 0..kh {
                for kx in 0..kw {
                    let w = *tile.get(&[f, ch, ky, kx]);
                    if w.mode() != config.mode {
                        return Err(TmaError::Shape(format!(
                            "weight mode {} in a {} configuration",
                            w.mode(),
                            config.mode
                        )));
                    }
                    let row = group_row * rows + ky;
                    // the newest pixel sits at the group's first cell
                    let cell = f * width + (kw - 1 - kx);
                    let i = reg_index(row, cell, depth);
                    regs[i] = w;
                    mapped[i] = true;
                }
            }
        }
    }
    Ok(WeightPlan {
        regs,
        mapped,
        zero_padded: padded_cells(config),
        active_groups: d[0],
    })
}

/// Lane `(row * 16 + depth) * 12 + k` holds the value popped `k`-th from its
/// FIFO, which sits in cell `11 - k` when the tile is complete.
pub fn fc_lane_position(lane: usize) -> (usize, usize, usize) {
    let k = lane % SAM_COLS;
    let q = lane / SAM_COLS;
    (q / NE_DEPTH, SAM_COLS - 1 - k, q % NE_DEPTH)
}

pub fn load_fc_weights(config: &ArrayConfig, weights: &[PsiWeight]) -> Result<WeightPlan> {
    if config.case != ArrayCase::Fc || weights.len() > FC_TILE {
        return Err(TmaError::Shape(format!(
            "{} weights for an FC tile of {FC_TILE} in a {} configuration",
            weights.len(),
            config.case
        )));
    }
    let mut regs = vec![PsiWeight::zero(config.mode); PEAK_MACS];
    let mut mapped = vec![false; PEAK_MACS];
    for (lane, w) in weights.iter().enumerate() {
        let (row, cell, depth) = fc_lane_position(lane);
        let i = reg_index(row, cell, depth);
        regs[i] = *w;
        mapped[i] = true;
    }
    Ok(WeightPlan {
        regs,
        mapped,
        zero_padded: Vec::new(),
        active_groups: 1,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FifoStats {
    /// Elements loaded from SRAM into the FIFO bank.
    pub sram_loads: u64,
    /// Elements re-queued from the array's outgoing edge.
    pub feedback_pushes: u64,
    pub max_occupancy: usize,
}

/// 12 x 16 activation queues.
#[derive(Debug, Clone)]
pub struct FifoBank {
    queues: Vec<VecDeque<u8>>,
    capacity: usize,
    stats: FifoStats,
}

impl Default for FifoBank {
    fn default() -> Self {
        Self::new(FIFO_CAPACITY)
    }
}

impl FifoBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            queues: vec![VecDeque::with_capacity(capacity); SAM_ROWS * NE_DEPTH],
            capacity,
            stats: FifoStats::default(),
        }
    }

    pub fn stats(&self) -> FifoStats {
        self.stats
    }

    pub fn len(&self, row: usize, depth: usize) -> usize {
        self.queues[row * NE_DEPTH + depth].len()
    }

    pub fn is_empty(&self, row: usize, depth: usize) -> bool {
        self.len(row, depth) == 0
    }

    fn push(&mut self, row: usize, depth: usize, v: u8) -> Result<()> {
        let q = &mut self.queues[row * NE_DEPTH + depth];
        if q.len() >= self.capacity {
            return Err(TmaError::FifoOverflow {
                row,
                depth,
                capacity: self.capacity,
            });
        }
        q.push_back(v);
        self.stats.max_occupancy = self.stats.max_occupancy.max(q.len());
        Ok(())
    }

    pub fn load_from_sram(&mut self, row: usize, depth: usize, values: &[i32]) -> Result<()> {
        for &v in values {
            self.push(row, depth, v as u8)?;
            self.stats.sram_loads += 1;
        }
        Ok(())
    }

    pub fn feed_back(&mut self, row: usize, depth: usize, v: u8) -> Result<()> {
        self.push(row, depth, v)?;
        self.stats.feedback_pushes += 1;
        Ok(())
    }

    pub fn pop(&mut self, row: usize, depth: usize) -> Result<u8> {
        self.queues[row * NE_DEPTH + depth]
            .pop_front()
            .ok_or(TmaError::FifoUnderflow { row, depth })
    }

    pub fn clear(&mut self) {
        self.queues.iter_mut().for_each(VecDeque::clear);
    }
}

/// Stream position of the value in a cell: output row (or FC segment) and
/// padded column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tag {
    pub row: usize,
    pub x: usize,
}

/// One column of activations entering or leaving the array, indexed `[row][depth]`.
pub type Column = [[ActPair; NE_DEPTH]; SAM_ROWS];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupOutput {
    pub group: usize,
    pub tag: Tag,
    pub value: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShiftResult {
    pub outputs: Vec<GroupOutput>,
    pub overflow18: u64,
}

/// Array state: 4 x 4 x 16 NEs plus the control tag pipeline.
#[derive(Debug, Clone)]
pub struct NeArray {
    config: ArrayConfig,
    nes: Vec<NeState>,
    ne_active: Vec<bool>,
    tags: [Option<Tag>; SAM_COLS],
    active_groups: usize,
    loads: u64,
}

fn ne_index(r: usize, c: usize, d: usize) -> usize {
    (r * NE_COLS + c) * NE_DEPTH + d
}

impl NeArray {
    pub fn new(config: ArrayConfig) -> Self {
        Self {
            config,
            nes: vec![NeState::new(); NE_ROWS * NE_COLS * NE_DEPTH],
            ne_active: vec![false; NE_ROWS * NE_COLS * NE_DEPTH],
            tags: [None; SAM_COLS],
            active_groups: 0,
            loads: 0,
        }
    }

    pub fn config(&self) -> &ArrayConfig {
        &self.config
    }

    /// Number of `load_weights` events so far.
    pub fn weight_loads(&self) -> u64 {
        self.loads
    }

    pub fn load(&mut self, plan: &WeightPlan) {
        for r in 0..NE_ROWS {
            for c in 0..NE_COLS {
                for d in 0..NE_DEPTH {
                    let ne = &mut self.nes[ne_index(r, c, d)];
                    for i in 0..3 {
                        for j in 0..3 {
                            ne.set_weight(i, j, *plan.weight(3 * r + i, 3 * c + j, d));
                        }
                    }
                    self.ne_active[ne_index(r, c, d)] = ne.has_weights();
                }
            }
        }
        self.active_groups = plan.active_groups;
        self.loads += 1;
    }

    /// Current weight register of a SAM cell.
    pub fn weight(&self, row: usize, cell: usize, depth: usize) -> PsiWeight {
        *self.nes[ne_index(row / 3, cell / 3, depth)]
            .sam(row % 3, cell % 3)
            .weight()
    }

    /// Empties every shift chain (between sweeps).
    pub fn flush(&mut self) {
        for ne in &mut self.nes {
            for _ in 0..3 {
                ne.shift_in([ActPair::default(); 3]);
            }
        }
        self.tags = [None; SAM_COLS];
    }

    /// Value and tag in the last cell, i.e. what the next shift pushes out.
    pub fn outgoing(&self) -> (Column, Option<Tag>) {
        let mut col = [[ActPair::default(); NE_DEPTH]; SAM_ROWS];
        for (row, slot) in col.iter_mut().enumerate() {
            for (d, v) in slot.iter_mut().enumerate() {
                *v = self.nes[ne_index(row / 3, NE_COLS - 1, d)]
                    .sam(row % 3, 2)
                    .input();
            }
        }
        (col, self.tags[SAM_COLS - 1])
    }

    pub fn cell_input(&self, row: usize, cell: usize, depth: usize) -> ActPair {
        self.nes[ne_index(row / 3, cell / 3, depth)]
            .sam(row % 3, cell % 3)
            .input()
    }

    pub fn tag(&self, cell: usize) -> Option<Tag> {
        self.tags[cell]
    }

    /// One SH_EN cycle through all twelve chains.
    pub fn shift(&mut self, column: &Column, tag: Option<Tag>) {
        for r in 0..NE_ROWS {
            for d in 0..NE_DEPTH {
                let mut carry = [column[3 * r][d], column[3 * r + 1][d], column[3 * r + 2][d]];
                for c in 0..NE_COLS {
                    carry = self.nes[ne_index(r, c, d)].shift_in(carry);
                }
            }
        }
        self.tags.copy_within(0..SAM_COLS - 1, 1);
        self.tags[0] = tag;
    }

    /// Column groups whose kernel window is complete, with the window's
    /// leftmost stream position, honouring the horizontal stride.
    pub fn ready_groups(&self) -> Vec<(usize, Tag)> {
        let width = self.config.case.group_width();
        let kw = self.config.window_w();
        (0..self.active_groups)
            .filter_map(|g| {
                let newest = self.tags[g * width]?;
                let oldest = self.tags[g * width + kw - 1]?;
                let complete = newest.row == oldest.row && newest.x == oldest.x + kw - 1;
                (complete && oldest.x % self.config.h_stride == 0).then_some((g, oldest))
            })
            .collect()
    }

    /// Evaluates a column group: every pass of every NE, MOA66 per column
    /// (Psum and bias enter the group's first column), then the top adders.
    pub fn compute_group(&mut self, group: usize, psum: i64, bias: i64) -> Result<(i64, u64)> {
        let cols_per_group = self.config.case.group_width() / 3;
        let passes = self.config.mode.passes();
        let mut overflow = 0;
        let mut total = 0i64;
        for (i, c) in (group * cols_per_group..(group + 1) * cols_per_group).enumerate() {
            let mut outs = [0i64; NE_ROWS * NE_DEPTH];
            for r in 0..NE_ROWS {
                for d in 0..NE_DEPTH {
                    let idx = ne_index(r, c, d);
                    // all-zero registers produce zero PSIs
                    if self.ne_active[idx] {
                        let (v, o) = self.nes[idx].evaluate(passes)?;
                        outs[r * NE_DEPTH + d] = v;
                        overflow += o as u64;
                    }
                }
            }
            let (p, b) = if i == 0 { (psum, bias) } else { (0, 0) };
            total += moa66(&outs, p, b)?;
        }
        Ok((total, overflow))
    }

    /// Shift, then evaluate every column group whose window just completed.
    /// `psum_bias` supplies the reloaded Psum and bias for `(group, tag)`.
    pub fn input_shift(
        &mut self,
        column: &Column,
        tag: Option<Tag>,
        mut psum_bias: impl FnMut(usize, Tag) -> Result<(i64, i64)>,
    ) -> Result<ShiftResult> {
        self.shift(column, tag);
        let mut res = ShiftResult::default();
        for (group, tag) in self.ready_groups() {
            let (p, b) = psum_bias(group, tag)?;
            let (value, of) = self.compute_group(group, p, b)?;
            res.overflow18 += of;
            res.outputs.push(GroupOutput { group, tag, value });
        }
        Ok(res)
    }
}

/// Simulation knobs that do not change functional results.
pub type SimOptions = ModelOptions;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRun {
    pub config: ArrayConfig,
    /// Final sums before post-ops, `[K, H_out, W_out]` (`[K]` for FC).
    pub finals: Tensor<i32>,
    /// Post-op output written to `Layer(n)`.
    pub activations: Tensor<i32>,
    pub cycles: CycleStats,
    pub fifo: FifoStats,
    /// Histogram: Psums delivered on a shift -> number of such shifts.
    pub psums_per_step: BTreeMap<usize, u64>,
    /// NE passes whose MOA18 sum exceeded 18 bits.
    pub overflow18: u64,
    /// Group outputs outside `ModelOptions::accumulator_bits`.
    pub width_violations: u64,
    pub bias_reads: u64,
    pub weight_reads: u64,
}

struct Tally {
    cycles: CycleStats,
    steps: BTreeMap<usize, u64>,
    overflow18: u64,
    width_violations: u64,
    bias_reads: u64,
    weight_reads: u64,
}

impl Tally {
    fn new() -> Self {
        Self {
            cycles: CycleStats::default(),
            steps: BTreeMap::new(),
            overflow18: 0,
            width_violations: 0,
            bias_reads: 0,
            weight_reads: 0,
        }
    }

    fn shift_done(&mut self, res: &ShiftResult, passes: usize, opts: &ModelOptions) {
        self.overflow18 += res.overflow18;
        if !res.outputs.is_empty() {
            *self.steps.entry(res.outputs.len()).or_default() += 1;
            // the whole array spends one more cycle per extra PSI pass
            self.cycles.psi_extra_cycles += passes as u64 - 1;
        }
        if let Some(bits) = opts.accumulator_bits {
            self.width_violations +=
                res.outputs.iter().filter(|o| !fits_signed(o.value, bits)).count() as u64;
        }
    }

    fn weight_load(&mut self, opts: &ModelOptions) {
        self.cycles.weight_load_events += 1;
        self.cycles.weight_load_cycles += opts.weight_load_cycles;
    }
}

fn read_weights(
    mem: &mut SramModel,
    offset: usize,
    count: usize,
    mode: PrecisionMode,
) -> Result<Vec<PsiWeight>> {
    mem.read(Region::Weights, offset, count)?
        .into_iter()
        .map(|w| decompose_weight(w, mode))
        .collect()
}

/// Runs one layer on the array. The caller has placed the input fmap in
/// `input_region`, the integer weights (`[K, C, kh, kw]` or `[O, I]`) at
/// offset 0 of `Weights`, the biases in `Bias`, and allocated
/// `PsumOfLayer(layer_index)` and `Layer(layer_index)`.
pub fn run_layer(
    layer: &LayerSpec,
    layer_index: usize,
    input_region: Region,
    mem: &mut SramModel,
    opts: &ModelOptions,
) -> Result<LayerRun> {
    let config = configure(layer)?;
    match layer.kind {
        LayerKind::Conv => run_conv(layer, &config, layer_index, input_region, mem, opts),
        LayerKind::Fc => run_fc(layer, &config, layer_index, input_region, mem, opts),
    }
}

fn run_conv(
    layer: &LayerSpec,
    config: &ArrayConfig,
    layer_index: usize,
    input_region: Region,
    mem: &mut SramModel,
    opts: &ModelOptions,
) -> Result<LayerRun> {
    let g = layer.geometry;
    let (c_in, h, w) = (layer.input.c, layer.input.h, layer.input.w);
    let out = layer.output_dims();
    let (k, oh, ow) = (out.c, out.h, out.w);
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    let case = config.case;
    let rows = case.group_rows();
    let width = case.group_width();
    let depth_tile = case.depth_tile().expect("conv case");
    let fpp = case.filters_per_pass();
    let passes = config.mode.passes();
    let wp = g.padded_w(w);
    let period = wp.max(SAM_COLS);
    let pad = g.padding as isize;
    let depth_tiles = c_in.div_ceil(depth_tile);
    let filter_groups = k.div_ceil(fpp);

    let mut array = NeArray::new(*config);
    let mut fifo = FifoBank::default();
    let mut tally = Tally::new();
    let mut finals = vec![0i32; k * oh * ow];

    // spatial row held by FIFO row `i` while streaming output row `r`
    let spatial_row = |r: usize, i: usize| (r * g.stride_v + i % rows) as isize - pad;
    let channel = |t: usize, i: usize, d: usize| t * depth_tile + (i / rows) * NE_DEPTH + d;
    let real_pixel = |y: isize, x: usize| {
        let xi = x as isize - pad;
        y >= 0 && y < h as isize && xi >= 0 && xi < w as isize
    };

    for fg in 0..filter_groups {
        let f0 = fg * fpp;
        let nf = fpp.min(k - f0);
        for t in 0..depth_tiles {
            let c0 = t * depth_tile;
            let nc = depth_tile.min(c_in - c0);
            let last_tile = t + 1 == depth_tiles;

            // weight decomposition block: SRAM -> PSI registers
            let mut tile = Vec::with_capacity(nf * nc * kh * kw);
            for f in f0..f0 + nf {
                for c in c0..c0 + nc {
                    let off = ((f * c_in + c) * kh) * kw;
                    tile.extend(read_weights(mem, off, kh * kw, config.mode)?);
                    tally.weight_reads += (kh * kw) as u64;
                }
            }
            let plan = load_weights(config, &Tensor::from_vec(&[nf, nc, kh, kw], tile)?)?;
            array.load(&plan);
            tally.weight_load(opts);
            let bias: Vec<i64> = if t == 0 {
                tally.bias_reads += nf as u64;
                mem.read(Region::Bias, f0, nf)?.into_iter().map(i64::from).collect()
            } else {
                vec![0; nf]
            };

            array.flush();
            fifo.clear();

            for r in 0..oh {
                for i in 0..SAM_ROWS {
                    if r > 0 && config.row_source(i) != RowSource::Sram {
                        continue;
                    }
                    let y = spatial_row(r, i);
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for d in 0..NE_DEPTH {
                        let ch = channel(t, i, d);
                        if d + (i / rows) * NE_DEPTH >= nc {
                            continue;
                        }
                        if !fifo.is_empty(i, d) {
                            return Err(TmaError::Shape(format!(
                                "FIFO row {i} depth {d} not drained at row start"
                            )));
                        }
                        let vals = mem.read(input_region, (ch * h + y as usize) * w, w)?;
                        fifo.load_from_sram(i, d, &vals)?;
                    }
                }

                // no bubbles after the last row; the drain covers it
                let slots = if r + 1 == oh { wp } else { period };
                for x in 0..slots {
                    // feedback first so a value can be re-popped on the shift it leaves
                    let (leaving, leaving_tag) = array.outgoing();
                    if let Some(lt) = leaving_tag {
                        if lt.row + 1 < oh {
                            for j in 0..SAM_ROWS {
                                if j % rows < g.stride_v {
                                    continue;
                                }
                                let dest = j - g.stride_v;
                                let y = spatial_row(lt.row, j);
                                if !real_pixel(y, lt.x) {
                                    continue;
                                }
                                for d in 0..NE_DEPTH {
                                    if d + (j / rows) * NE_DEPTH < nc {
                                        fifo.feed_back(dest, d, leaving[j][d].x)?;
                                    }
                                }
                            }
                        }
                    }

                    let mut column = [[ActPair::default(); NE_DEPTH]; SAM_ROWS];
                    let tag = if x < wp {
                        for (i, row) in column.iter_mut().enumerate() {
                            if !real_pixel(spatial_row(r, i), x) {
                                continue;
                            }
                            for (d, slot) in row.iter_mut().enumerate() {
                                if d + (i / rows) * NE_DEPTH < nc {
                                    // GEN_NEG at the array edge
                                    *slot = ActPair::new(fifo.pop(i, d)?);
                                }
                            }
                        }
                        Some(Tag { row: r, x })
                    } else {
                        None
                    };

                    let res = shift_conv(
                        &mut array, &column, tag, mem, layer_index, f0, oh, ow, g.stride_h, t,
                        &bias,
                    )?;
                    tally.cycles.shift_cycles += 1;
                    tally.shift_done(&res, passes, opts);
                    deliver(mem, layer_index, &res, f0, oh, ow, g.stride_h, last_tile, &mut finals)?;
                }
            }

            // drain until the last column group has seen the final pixel
            let empty = [[ActPair::default(); NE_DEPTH]; SAM_ROWS];
            for _ in 0..(nf - 1) * width {
                let res = shift_conv(
                    &mut array, &empty, None, mem, layer_index, f0, oh, ow, g.stride_h, t, &bias,
                )?;
                tally.cycles.fill_cycles += 1;
                tally.shift_done(&res, passes, opts);
                deliver(mem, layer_index, &res, f0, oh, ow, g.stride_h, last_tile, &mut finals)?;
            }
        }
    }

    finish(layer, *config, layer_index, mem, tally, fifo.stats(), &[k, oh, ow], finals)
}

#[allow(clippy::too_many_arguments)]
fn shift_conv(
    array: &mut NeArray,
    column: &Column,
    tag: Option<Tag>,
    mem: &mut SramModel,
    layer_index: usize,
    f0: usize,
    oh: usize,
    ow: usize,
    stride_h: usize,
    tile: usize,
    bias: &[i64],
) -> Result<ShiftResult> {
    array.input_shift(column, tag, |group, tag| {
        let idx = ((f0 + group) * oh + tag.row) * ow + tag.x / stride_h;
        let psum = if tile > 0 {
            mem.load_psum(layer_index, idx)? as i64
        } else {
            0
        };
        Ok((psum, bias[group]))
    })
}

#[allow(clippy::too_many_arguments)]
fn deliver(
    mem: &mut SramModel,
    layer_index: usize,
    res: &ShiftResult,
    f0: usize,
    oh: usize,
    ow: usize,
    stride_h: usize,
    last_tile: bool,
    finals: &mut [i32],
) -> Result<()> {
    for o in &res.outputs {
        let idx = ((f0 + o.group) * oh + o.tag.row) * ow + o.tag.x / stride_h;
        mem.store_psum(layer_index, idx, o.value, last_tile)?;
        if last_tile {
            finals[idx] = o.value as i32;
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn finish(
    layer: &LayerSpec,
    config: ArrayConfig,
    layer_index: usize,
    mem: &mut SramModel,
    tally: Tally,
    fifo: FifoStats,
    dims: &[usize],
    finals: Vec<i32>,
) -> Result<LayerRun> {
    let finals = Tensor::from_vec(dims, finals)?;
    let activations = mem.apply_post_ops(&finals, &layer.post, layer_index)?;
    let mut cycles = tally.cycles;
    cycles.total_cycles = cycles.parts_sum();
    Ok(LayerRun {
        config,
        finals,
        activations,
        cycles,
        fifo,
        psums_per_step: tally.steps,
        overflow18: tally.overflow18,
        width_violations: tally.width_violations,
        bias_reads: tally.bias_reads,
        weight_reads: tally.weight_reads,
    })
}

fn run_fc(
    layer: &LayerSpec,
    config: &ArrayConfig,
    layer_index: usize,
    input_region: Region,
    mem: &mut SramModel,
    opts: &ModelOptions,
) -> Result<LayerRun> {
    let inputs = layer.input_len();
    let outputs = layer.filters;
    let tiles = inputs.div_ceil(FC_TILE);
    let passes = config.mode.passes();
    let mut array = NeArray::new(*config);
    let mut fifo = FifoBank::default();
    let mut tally = Tally::new();
    let mut finals = vec![0i32; outputs];

    for t in 0..tiles {
        let base = t * FC_TILE;
        let lanes = FC_TILE.min(inputs - base);
        let last_tile = t + 1 == tiles;
        for o in 0..outputs {
            let ws = read_weights(mem, o * inputs + base, lanes, config.mode)?;
            tally.weight_reads += lanes as u64;
            array.load(&load_fc_weights(config, &ws)?);
            tally.weight_load(opts);
            let bias = if t == 0 {
                tally.bias_reads += 1;
                mem.read(Region::Bias, o, 1)?[0] as i64
            } else {
                0
            };

            // every queue receives its 12 lanes fresh from SRAM
            for i in 0..SAM_ROWS {
                for d in 0..NE_DEPTH {
                    let first = (i * NE_DEPTH + d) * SAM_COLS;
                    if first < lanes {
                        let n = SAM_COLS.min(lanes - first);
                        let vals = mem.read(input_region, base + first, n)?;
                        fifo.load_from_sram(i, d, &vals)?;
                    }
                }
            }
            for k in 0..FC_SHIFTS_PER_TILE {
                let mut column = [[ActPair::default(); NE_DEPTH]; SAM_ROWS];
                for (i, row) in column.iter_mut().enumerate() {
                    for (d, slot) in row.iter_mut().enumerate() {
                        if (i * NE_DEPTH + d) * SAM_COLS + k < lanes {
                            *slot = ActPair::new(fifo.pop(i, d)?);
                        }
                    }
                }
                let res = array.input_shift(&column, Some(Tag { row: o, x: k }), |_, _| {
                    let psum = if t > 0 {
                        mem.load_psum(layer_index, o)? as i64
                    } else {
                        0
                    };
                    Ok((psum, bias))
                })?;
                tally.cycles.shift_cycles += 1;
                tally.shift_done(&res, passes, opts);
                for out in &res.outputs {
                    mem.store_psum(layer_index, o, out.value, last_tile)?;
                    if last_tile {
                        finals[o] = out.value as i32;
                    }
                }
            }
        }
    }

    finish(layer, *config, layer_index, mem, tally, fifo.stats(), &[outputs], finals)
}

/// Sets up a private SRAM with the layer's data, runs it, and returns the run
/// together with the SRAM counters.
pub fn simulate_layer(
    layer: &LayerSpec,
    input: &[u8],
    weights: &Tensor<i32>,
    bias: &[i32],
    opts: &ModelOptions,
) -> Result<(LayerRun, AccessCounters)> {
    layer.validate()?;
    if input.len() != layer.input_len() {
        return Err(TmaError::Shape(format!(
            "input has {} elements, layer expects {}",
            input.len(),
            layer.input_len()
        )));
    }
    let expected_w: usize = match layer.kind {
        LayerKind::Conv => {
            layer.filters * layer.input.c * layer.geometry.kernel_h * layer.geometry.kernel_w
        }
        LayerKind::Fc => layer.filters * layer.input_len(),
    };
    if weights.len() != expected_w || bias.len() != layer.filters {
        return Err(TmaError::Shape(format!(
            "weights {:?} / {} biases do not match layer '{}'",
            weights.dims(),
            bias.len(),
            layer.name
        )));
    }
    let out_bytes = if layer.post.relu { 1 } else { 4 };
    let mut mem = SramModel::default();
    mem.add_region(Region::Inputs, input.len(), 1)?;
    mem.add_region(Region::Weights, weights.len(), 1)?;
    mem.add_region(Region::Bias, bias.len(), 4)?;
    mem.add_region(Region::PsumOfLayer(1), layer.output_dims().len(), PSUM_BYTES)?;
    mem.add_region(Region::Layer(1), layer.post_dims().len(), out_bytes)?;
    let input_i32: Vec<i32> = input.iter().map(|&v| v as i32).collect();
    mem.load_from_dram(Region::Inputs, 0, &input_i32)?;
    mem.load_from_dram(Region::Weights, 0, weights.data())?;
    mem.load_from_dram(Region::Bias, 0, bias)?;
    let run = run_layer(layer, 1, Region::Inputs, &mut mem, opts)?;
    Ok((run, mem.counters().clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::golden::{fc_quantized_ref, quantized_ref};
    use crate::network::{ConvGeometry, FmapDims};
    use crate::psiquant::decompose_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn conv_layer(c: usize, h: usize, w: usize, k: usize, g: ConvGeometry, mode: PrecisionMode) -> LayerSpec {
        LayerSpec::conv("t", FmapDims::new(c, h, w), k, g, mode)
    }

    #[test]
    fn case_table() {
        let rows: Vec<_> = [ArrayCase::Conv3, ArrayCase::Conv5, ArrayCase::Conv11, ArrayCase::Fc]
            .iter()
            .map(|c| (c.filters_per_pass(), c.depth_tile(), c.psums_per_step(), c.ne_block()))
            .collect();
        assert_eq!(
            rows,
            vec![
                (4, Some(64), 4, (1, 1)),
                (2, Some(32), 2, (2, 2)),
                (1, Some(16), 1, (4, 4)),
                (1, None, 1, (4, 4)),
            ]
        );
        assert_eq!(PEAK_MACS, 2304);
    }

    #[test]
    fn configure_examples() {
        let l = conv_layer(192, 13, 13, 8, ConvGeometry::square(3, 1, 1), PrecisionMode::Int5);
        let c = configure(&l).unwrap();
        assert_eq!(
            (c.case, c.filters_per_pass(), c.depth_tile(), c.psums_per_step()),
            (ArrayCase::Conv3, 4, Some(64), 4)
        );
        let l = conv_layer(48, 27, 27, 8, ConvGeometry::square(5, 1, 2), PrecisionMode::Int5);
        assert_eq!(configure(&l).unwrap().case, ArrayCase::Conv5);
        let l = conv_layer(3, 224, 224, 8, ConvGeometry::square(11, 4, 2), PrecisionMode::Int5);
        let c = configure(&l).unwrap();
        assert_eq!((c.case, c.depth_tile(), c.psums_per_step()), (ArrayCase::Conv11, Some(16), 1));
        let l = conv_layer(3, 20, 20, 8, ConvGeometry::square(12, 1, 0), PrecisionMode::Int5);
        assert!(matches!(configure(&l), Err(TmaError::Unsupported(_))));
    }

    #[test]
    fn row_sources_per_case() {
        let mk = |case, s| ArrayConfig {
            case,
            kernel_h: 3,
            kernel_w: 3,
            v_stride: s,
            h_stride: 1,
            mode: PrecisionMode::Int5,
        };
        let fresh = |c: ArrayConfig| -> Vec<usize> {
            (0..SAM_ROWS).filter(|&i| c.row_source(i) == RowSource::Sram).collect()
        };
        // 1-based rows 3, 6, 9, 12
        assert_eq!(fresh(mk(ArrayCase::Conv3, 1)), vec![2, 5, 8, 11]);
        assert_eq!(fresh(mk(ArrayCase::Conv5, 1)).len(), 2);
        assert_eq!(fresh(mk(ArrayCase::Conv11, 1)), vec![11]);
        assert_eq!(fresh(mk(ArrayCase::Conv11, 4)), vec![8, 9, 10, 11]);
        assert_eq!(fresh(mk(ArrayCase::Fc, 1)).len(), 12);
        assert_eq!(mk(ArrayCase::Conv3, 2).row_source(0), RowSource::Feedback { from_row: 2 });
    }

    fn psi_tile(f: usize, c: usize, kh: usize, kw: usize, v: i32, mode: PrecisionMode) -> Tensor<PsiWeight> {
        let w = Tensor::from_vec(&[f, c, kh, kw], vec![v; f * c * kh * kw]).unwrap();
        decompose_tensor(&w, mode).unwrap().0
    }

    #[test]
    fn weight_plan_zero_padding() {
        let cfg = configure(&conv_layer(32, 8, 8, 2, ConvGeometry::square(5, 1, 0), PrecisionMode::Int5)).unwrap();
        let plan = load_weights(&cfg, &psi_tile(2, 32, 5, 5, 1, PrecisionMode::Int5)).unwrap();
        let padded = plan.zero_padded_cells();
        assert!(padded.iter().all(|&(r, c)| r % 6 == 5 || c % 6 == 5));
        assert_eq!(padded.len(), 144 - 4 * 25);
        for &(r, c) in padded {
            for d in 0..NE_DEPTH {
                assert!(plan.weight(r, c, d).is_zero());
            }
        }
        assert_eq!(plan.active_lanes(), 2 * 32 * 25);

        let cfg = configure(&conv_layer(16, 12, 12, 1, ConvGeometry::square(11, 1, 0), PrecisionMode::Int5)).unwrap();
        let plan = load_weights(&cfg, &psi_tile(1, 16, 11, 11, 2, PrecisionMode::Int5)).unwrap();
        assert!(plan.zero_padded_cells().iter().all(|&(r, c)| r == 11 || c == 11));
        assert_eq!(plan.zero_padded_cells().len(), 23);
    }

    #[test]
    fn identity_filters_hold_center_only() {
        let cfg = configure(&conv_layer(64, 8, 8, 4, ConvGeometry::square(3, 1, 1), PrecisionMode::Int5)).unwrap();
        let mut w = Tensor::<i32>::zeros(&[4, 64, 3, 3]).unwrap();
        for f in 0..4 {
            for c in 0..64 {
                w.set(&[f, c, 1, 1], 1);
            }
        }
        let (psi, _) = decompose_tensor(&w, PrecisionMode::Int5).unwrap();
        let plan = load_weights(&cfg, &psi).unwrap();
        assert_eq!(plan.active_lanes(), PEAK_MACS);
        for r in 0..SAM_ROWS {
            for c in 0..SAM_COLS {
                for d in 0..NE_DEPTH {
                    let expect = (r % 3 == 1 && c % 3 == 1) as i32;
                    assert_eq!(crate::psiquant::reconstruct(plan.weight(r, c, d)), expect);
                }
            }
        }
    }

    #[test]
    fn tile_shape_mismatch() {
        let cfg = configure(&conv_layer(64, 8, 8, 4, ConvGeometry::square(3, 1, 1), PrecisionMode::Int5)).unwrap();
        assert!(load_weights(&cfg, &psi_tile(5, 64, 3, 3, 1, PrecisionMode::Int5)).is_err());
        assert!(load_weights(&cfg, &psi_tile(4, 65, 3, 3, 1, PrecisionMode::Int5)).is_err());
        assert!(load_weights(&cfg, &psi_tile(4, 64, 5, 5, 1, PrecisionMode::Int5)).is_err());
        assert!(load_weights(&cfg, &psi_tile(4, 64, 3, 3, 1, PrecisionMode::Int8)).is_err());
    }

    #[test]
    fn fifo_bounds() {
        let mut f = FifoBank::new(2);
        assert!(matches!(f.pop(0, 0), Err(TmaError::FifoUnderflow { .. })));
        f.feed_back(1, 2, 9).unwrap();
        f.load_from_sram(1, 2, &[8]).unwrap();
        assert!(matches!(f.feed_back(1, 2, 7), Err(TmaError::FifoOverflow { .. })));
        assert_eq!(f.pop(1, 2).unwrap(), 9);
        assert_eq!(f.stats().max_occupancy, 2);
    }

    #[test]
    fn constant_plane_identity_filters() {
        let g = ConvGeometry::square(3, 1, 0);
        let layer = conv_layer(64, 14, 14, 4, g, PrecisionMode::Int5);
        let mut w = Tensor::<i32>::zeros(&[4, 64, 3, 3]).unwrap();
        for f in 0..4 {
            for c in 0..64 {
                w.set(&[f, c, 1, 1], 1);
            }
        }
        let input = vec![7u8; 64 * 14 * 14];
        let (run, _) = simulate_layer(&layer, &input, &w, &[0; 4], &ModelOptions::default()).unwrap();
        assert!(run.finals.data().iter().all(|&v| v == 448));
        assert_eq!(run.psums_per_step.keys().max(), Some(&4));
    }

    fn random_conv(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, k: usize, g: ConvGeometry, mode: PrecisionMode) {
        let layer = conv_layer(c, h, w, k, g, mode);
        let input: Vec<u8> = (0..c * h * w).map(|_| rng.gen()).collect();
        let wt = Tensor::from_fn(&[k, c, g.kernel_h, g.kernel_w], |_| rng.gen_range(mode.weight_range())).unwrap();
        let bias: Vec<i32> = (0..k).map(|_| rng.gen_range(-5000..5000)).collect();
        let (run, _) = simulate_layer(&layer, &input, &wt, &bias, &ModelOptions::default()).unwrap();
        let (psi, _) = decompose_tensor(&wt, mode).unwrap();
        let x = Tensor::from_vec(&[c, h, w], input).unwrap();
        assert_eq!(run.finals, quantized_ref(&x, &psi, &bias, &g).unwrap(), "{g:?} {mode}");
    }

    #[test]
    fn conv_bit_exact_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for mode in PrecisionMode::ALL {
            random_conv(&mut rng, 5, 9, 9, 3, ConvGeometry::square(3, 1, 1), mode);
            random_conv(&mut rng, 70, 8, 13, 6, ConvGeometry::square(3, 2, 0), mode);
            random_conv(&mut rng, 20, 10, 10, 3, ConvGeometry::square(5, 1, 2), mode);
            random_conv(&mut rng, 3, 16, 16, 2, ConvGeometry::square(11, 4, 1), mode);
            random_conv(&mut rng, 17, 7, 6, 5, ConvGeometry::square(1, 1, 0), mode);
            let rect = ConvGeometry {
                kernel_h: 2,
                kernel_w: 4,
                stride_v: 1,
                stride_h: 3,
                padding: 1,
            };
            random_conv(&mut rng, 33, 6, 15, 3, rect, mode);
        }
    }

    #[test]
    fn fc_dot_product_of_ones() {
        let layer = LayerSpec::fc("fc", 2304, 1, PrecisionMode::Int5);
        let w = Tensor::from_vec(&[1, 2304], vec![1; 2304]).unwrap();
        let (run, _) = simulate_layer(&layer, &[1; 2304], &w, &[0], &ModelOptions::default()).unwrap();
        assert_eq!(run.finals.data(), &[2304]);
        assert_eq!(run.cycles.shift_cycles, 12);
        assert_eq!(run.fifo.feedback_pushes, 0);
    }

    #[test]
    fn fc_bit_exact_multi_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for mode in PrecisionMode::ALL {
            let (inputs, outputs) = (5000, 3);
            let layer = LayerSpec::fc("fc", inputs, outputs, mode);
            let x: Vec<u8> = (0..inputs).map(|_| rng.gen()).collect();
            let w = Tensor::from_fn(&[outputs, inputs], |_| rng.gen_range(mode.weight_range())).unwrap();
            let b: Vec<i32> = (0..outputs).map(|_| rng.gen_range(-100..100)).collect();
            let (run, counters) = simulate_layer(&layer, &x, &w, &b, &ModelOptions::default()).unwrap();
            let (psi, _) = decompose_tensor(&w, mode).unwrap();
            assert_eq!(run.finals.data(), fc_quantized_ref(&x, &psi, &b).unwrap().as_slice());
            assert_eq!(counters.psum_loads, 2 * outputs as u64);
            assert_eq!(counters.psum_stores, 3 * outputs as u64);
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let layer = LayerSpec::fc("fc", 100, 2, PrecisionMode::Int8);
        let w = Tensor::<i32>::zeros(&[2, 100]).unwrap();
        let (run, _) = simulate_layer(&layer, &[200; 100], &w, &[0, -4], &ModelOptions::default()).unwrap();
        assert_eq!(run.finals.data(), &[0, -4]);
    }

    #[test]
    fn too_wide_rows_overflow_the_fifo() {
        let layer = conv_layer(1, 3, 230, 1, ConvGeometry::square(3, 1, 0), PrecisionMode::Int5);
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1; 9]).unwrap();
        let err = simulate_layer(&layer, &vec![1; 690], &w, &[0], &ModelOptions::default()).unwrap_err();
        assert!(matches!(err, TmaError::FifoOverflow { .. }), "{err}");
    }

    #[test]
    fn weights_stay_fixed_within_a_sweep() {
        let cfg = configure(&conv_layer(8, 8, 8, 4, ConvGeometry::square(3, 1, 1), PrecisionMode::Int8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::from_fn(&[4, 8, 3, 3], |_| rng.gen_range(-128..128)).unwrap();
        let (psi, _) = decompose_tensor(&w, PrecisionMode::Int8).unwrap();
        let plan = load_weights(&cfg, &psi).unwrap();
        let mut array = NeArray::new(cfg);
        array.load(&plan);
        let snapshot: Vec<PsiWeight> = (0..PEAK_MACS)
            .map(|i| array.weight(i / (SAM_COLS * NE_DEPTH), (i / NE_DEPTH) % SAM_COLS, i % NE_DEPTH))
            .collect();
        let col = [[ActPair::new(3); NE_DEPTH]; SAM_ROWS];
        for x in 0..40 {
            array.input_shift(&col, Some(Tag { row: 0, x }), |_, _| Ok((0, 0))).unwrap();
        }
        for (i, w) in snapshot.iter().enumerate() {
            assert_eq!(*w, array.weight(i / (SAM_COLS * NE_DEPTH), (i / NE_DEPTH) % SAM_COLS, i % NE_DEPTH));
        }
        assert_eq!(array.weight_loads(), 1);
    }
}
