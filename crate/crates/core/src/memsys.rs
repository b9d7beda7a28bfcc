//! On-chip SRAM model with named regions, Psum spill/reload, post-ops and
//! exact access counters. DRAM is modelled only as ingress/egress byte counts.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TmaError};
use crate::network::PostOps;
use crate::tensor::Tensor;

pub const SRAM_CAPACITY: usize = 4 * 1024 * 1024;
/// Stored Psum element width in bytes.
pub const PSUM_BYTES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    Inputs,
    Weights,
    Bias,
    PsumOfLayer(usize),
    Layer(usize),
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Region::Inputs => f.write_str("inputs"),
            Region::Weights => f.write_str("weights"),
            Region::Bias => f.write_str("bias"),
            Region::PsumOfLayer(n) => write!(f, "psum_of_layer_{n}"),
            Region::Layer(n) => write!(f, "layer_{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounters {
    pub reads: u64,
    pub writes: u64,
    pub read_bytes: u64,
    pub write_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessCounters {
    pub regions: BTreeMap<Region, RegionCounters>,
    pub psum_loads: u64,
    /// Every Psum delivered by the array, including final sums headed for post-ops.
    pub psum_stores: u64,
    pub dram_in_bytes: u64,
    pub dram_out_bytes: u64,
}

impl AccessCounters {
    pub fn region(&self, r: Region) -> RegionCounters {
        self.regions.get(&r).copied().unwrap_or_default()
    }

    pub fn total_read_bytes(&self) -> u64 {
        self.regions.values().map(|c| c.read_bytes).sum()
    }

    pub fn total_write_bytes(&self) -> u64 {
        self.regions.values().map(|c| c.write_bytes).sum()
    }

    /// Difference `self - earlier`, for per-layer accounting.
    pub fn since(&self, earlier: &AccessCounters) -> AccessCounters {
        let mut regions = BTreeMap::new();
        for (r, c) in &self.regions {
            let e = earlier.region(*r);
            regions.insert(
                *r,
                RegionCounters {
                    reads: c.reads - e.reads,
                    writes: c.writes - e.writes,
                    read_bytes: c.read_bytes - e.read_bytes,
                    write_bytes: c.write_bytes - e.write_bytes,
                },
            );
        }
        AccessCounters {
            regions,
            psum_loads: self.psum_loads - earlier.psum_loads,
            psum_stores: self.psum_stores - earlier.psum_stores,
            dram_in_bytes: self.dram_in_bytes - earlier.dram_in_bytes,
            dram_out_bytes: self.dram_out_bytes - earlier.dram_out_bytes,
        }
    }
}

#[derive(Debug, Clone)]
struct RegionData {
    base: usize,
    elem_bytes: usize,
    data: Vec<i32>,
    written: Vec<bool>,
}

impl RegionData {
    fn bytes(&self) -> usize {
        self.data.len() * self.elem_bytes
    }
}

#[derive(Debug, Clone)]
pub struct SramModel {
    capacity: usize,
    used: usize,
    regions: BTreeMap<Region, RegionData>,
    counters: AccessCounters,
}

impl Default for SramModel {
    fn default() -> Self {
        Self::new(SRAM_CAPACITY)
    }
}

impl SramModel {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            used: 0,
            regions: BTreeMap::new(),
            counters: AccessCounters::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn used_bytes(&self) -> usize {
        self.used
    }

    /// Allocates `elems` elements of `elem_bytes` each after the last region.
    pub fn add_region(&mut self, region: Region, elems: usize, elem_bytes: usize) -> Result<()> {
        if self.regions.contains_key(&region) {
            return Err(TmaError::Validation(format!("region {region} already exists")));
        }
        let bytes = elems * elem_bytes;
        if self.used + bytes > self.capacity {
            return Err(TmaError::Capacity {
                requested: self.used + bytes,
                capacity: self.capacity,
            });
        }
        self.regions.insert(
            region,
            RegionData {
                base: self.used,
                elem_bytes,
                data: vec![0; elems],
                written: vec![false; elems],
            },
        );
        self.used += bytes;
        Ok(())
    }

    /// Byte extent `[start, end)` of a region.
    pub fn extent(&self, region: Region) -> Option<(usize, usize)> {
        self.regions
            .get(&region)
            .map(|r| (r.base, r.base + r.bytes()))
    }

    pub fn region_len(&self, region: Region) -> Option<usize> {
        self.regions.get(&region).map(|r| r.data.len())
    }

    pub fn counters(&self) -> &AccessCounters {
        &self.counters
    }

    fn region_mut(&mut self, region: Region, offset: usize, count: usize) -> Result<&mut RegionData> {
        let r = self
            .regions
            .get_mut(&region)
            .ok_or_else(|| TmaError::UnknownRegion(region.to_string()))?;
        if offset + count > r.data.len() {
            return Err(TmaError::OutOfBounds {
                region: region.to_string(),
                offset,
                count,
                extent: r.data.len(),
            });
        }
        Ok(r)
    }

    pub fn read(&mut self, region: Region, offset: usize, count: usize) -> Result<Vec<i32>> {
        let r = self.region_mut(region, offset, count)?;
        let out = r.data[offset..offset + count].to_vec();
        let bytes = (count * r.elem_bytes) as u64;
        let c = self.counters.regions.entry(region).or_default();
        c.reads += count as u64;
        c.read_bytes += bytes;
        Ok(out)
    }

    pub fn write(&mut self, region: Region, offset: usize, values: &[i32]) -> Result<()> {
        let r = self.region_mut(region, offset, values.len())?;
        r.data[offset..offset + values.len()].copy_from_slice(values);
        r.written[offset..offset + values.len()].fill(true);
        let bytes = (values.len() * r.elem_bytes) as u64;
        let c = self.counters.regions.entry(region).or_default();
        c.writes += values.len() as u64;
        c.write_bytes += bytes;
        Ok(())
    }

    /// DRAM -> SRAM transfer.
    pub fn load_from_dram(&mut self, region: Region, offset: usize, values: &[i32]) -> Result<()> {
        self.write(region, offset, values)?;
        let eb = self.regions[&region].elem_bytes;
        self.counters.dram_in_bytes += (values.len() * eb) as u64;
        Ok(())
    }

    /// SRAM -> DRAM transfer.
    pub fn store_to_dram(&mut self, region: Region, offset: usize, count: usize) -> Result<Vec<i32>> {
        let v = self.read(region, offset, count)?;
        let eb = self.regions[&region].elem_bytes;
        self.counters.dram_out_bytes += (count * eb) as u64;
        Ok(v)
    }

    /// Delivers one Psum from the array. Intermediate Psums are written to
    /// the layer's Psum region; a final sum goes to the post-op path.
    pub fn store_psum(&mut self, layer: usize, index: usize, value: i64, is_final: bool) -> Result<()> {
        let v = i32::try_from(value).map_err(|_| TmaError::Width {
            what: "stored Psum",
            value,
            bits: (PSUM_BYTES * 8) as u32,
        })?;
        self.counters.psum_stores += 1;
        if !is_final {
            self.write(Region::PsumOfLayer(layer), index, &[v])?;
        }
        Ok(())
    }

    pub fn load_psum(&mut self, layer: usize, index: usize) -> Result<i32> {
        let region = Region::PsumOfLayer(layer);
        let r = self.region_mut(region, index, 1)?;
        if !r.written[index] {
            return Err(TmaError::PsumMissing { layer, index });
        }
        let v = self.read(region, index, 1)?[0];
        self.counters.psum_loads += 1;
        Ok(v)
    }

    /// Runs the post-ops on a layer's final sums (`[C, H, W]`) and writes the
    /// result to `Layer(layer)`.
    pub fn apply_post_ops(
        &mut self,
        finals: &Tensor<i32>,
        post: &PostOps,
        layer: usize,
    ) -> Result<Tensor<i32>> {
        let out = post_process(finals, post)?;
        self.write(Region::Layer(layer), 0, out.data())?;
        Ok(out)
    }
}

/// Requantisation shift, ReLU clamp to `[0, 255]` and optional max-pooling.
/// Without ReLU the shifted sums pass through unclamped.
pub fn post_process(finals: &Tensor<i32>, post: &PostOps) -> Result<Tensor<i32>> {
    let act = finals.map(|&v| {
        let s = v >> post.requant_shift;
        if post.relu {
            s.clamp(0, 255)
        } else {
            s
        }
    });
    match post.pool {
        None => Ok(act),
        Some(p) => {
            let d = act.dims();
            let (c, h, w) = match d {
                [c, h, w] => (*c, *h, *w),
                [n] => (*n, 1, 1),
                _ => return Err(TmaError::Shape(format!("cannot pool tensor of dims {d:?}"))),
            };
            if p.size > h || p.size > w {
                return Err(TmaError::Shape(format!("pool {} larger than {h}x{w}", p.size)));
            }
            let oh = (h - p.size) / p.stride + 1;
            let ow = (w - p.size) / p.stride + 1;
            let src = act.data();
            let mut out = Vec::with_capacity(c * oh * ow);
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = i32::MIN;
                        for dy in 0..p.size {
                            for dx in 0..p.size {
                                let (y, x) = (oy * p.stride + dy, ox * p.stride + dx);
                                m = m.max(src[(ch * h + y) * w + x]);
                            }
                        }
                        out.push(m);
                    }
                }
            }
            Tensor::from_vec(&[c, oh, ow], out)
        }
    }
}
