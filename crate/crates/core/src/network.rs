//! Layer and network descriptions, and the TOML network schema.
//!
//! ```toml
//! name = "toy"
//! input = [16, 12, 12]        # C, H, W of the network input
//! precision = "int5"          # default for every layer
//!
//! [[layer]]
//! name = "c1"
//! kind = "conv"
//! filters = 8
//! kernel = 3                  # or [kh, kw]
//! stride = 1                  # or [vertical, horizontal]
//! padding = 1
//! requant_shift = 6           # arithmetic right shift before the ReLU clamp
//! pool = { size = 2, stride = 2 }
//!
//! [[layer]]
//! name = "f1"
//! kind = "fc"
//! outputs = 10
//! relu = false                # raw 32-bit outputs; only allowed on the last layer
//! ```
//!
//! Layer input shapes are chained from the previous layer's pooled output;
//! a fully-connected layer flattens its input.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TmaError};
use crate::psiquant::PrecisionMode;

pub const ALEXNET_TOML: &str = include_str!("../data/alexnet.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
        })
    }
}

/// Feature-map shape, `[C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FmapDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl FmapDims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool {
    pub size: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostOps {
    pub relu: bool,
    pub requant_shift: u32,
    pub pool: Option<Pool>,
}

impl Default for PostOps {
    fn default() -> Self {
        Self {
            relu: true,
            requant_shift: 0,
            pool: None,
        }
    }
}

/// Spatial parameters of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_v: usize,
    pub stride_h: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride_v: stride,
            stride_h: stride,
            padding,
        }
    }

    pub fn out_h(&self, in_h: usize) -> usize {
        (in_h + 2 * self.padding - self.kernel_h) / self.stride_v + 1
    }

    pub fn out_w(&self, in_w: usize) -> usize {
        (in_w + 2 * self.padding - self.kernel_w) / self.stride_h + 1
    }

    pub fn padded_w(&self, in_w: usize) -> usize {
        in_w + 2 * self.padding
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub input: FmapDims,
    /// Output channels for conv, output neurons for fc.
    pub filters: usize,
    /// Ignored for fc layers.
    pub geometry: ConvGeometry,
    pub precision: PrecisionMode,
    pub post: PostOps,
}

impl LayerSpec {
    pub fn conv(
        name: &str,
        input: FmapDims,
        filters: usize,
        geometry: ConvGeometry,
        precision: PrecisionMode,
    ) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Conv,
            input,
            filters,
            geometry,
            precision,
            post: PostOps::default(),
        }
    }

    pub fn fc(name: &str, inputs: usize, outputs: usize, precision: PrecisionMode) -> Self {
        Self {
            name: name.to_string(),
            kind: LayerKind::Fc,
            input: FmapDims::new(inputs, 1, 1),
            filters: outputs,
            geometry: ConvGeometry::square(1, 1, 0),
            precision,
            post: PostOps::default(),
        }
    }

    pub fn with_post(mut self, post: PostOps) -> Self {
        self.post = post;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    /// Shape of the raw sums before post-ops.
    pub fn output_dims(&self) -> FmapDims {
        match self.kind {
            LayerKind::Conv => FmapDims::new(
                self.filters,
                self.geometry.out_h(self.input.h),
                self.geometry.out_w(self.input.w),
            ),
            LayerKind::Fc => FmapDims::new(self.filters, 1, 1),
        }
    }

    /// Shape after pooling.
    pub fn post_dims(&self) -> FmapDims {
        let o = self.output_dims();
        match self.post.pool {
            Some(p) => FmapDims::new(
                o.c,
                (o.h - p.size) / p.stride + 1,
                (o.w - p.size) / p.stride + 1,
            ),
            None => o,
        }
    }

    pub fn macs(&self) -> u64 {
        match self.kind {
            LayerKind::Conv => {
                let o = self.output_dims();
                (o.len() * self.input.c * self.geometry.kernel_h * self.geometry.kernel_w) as u64
            }
            LayerKind::Fc => (self.input_len() * self.filters) as u64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| {
            Err(TmaError::Validation(format!(
                "layer '{}': field `{field}`: {msg}",
                self.name
            )))
        };
        if self.filters == 0 {
            return bad("filters", "must be >= 1".into());
        }
        if self.input.is_empty() {
            return bad("input", format!("empty input {:?}", self.input));
        }
        if self.kind == LayerKind::Conv {
            let g = &self.geometry;
            if g.kernel_h == 0 || g.kernel_w == 0 {
                return bad("kernel", "must be >= 1".into());
            }
            if g.stride_v == 0 || g.stride_h == 0 {
                return bad("stride", "must be >= 1".into());
            }
            if g.kernel_h > self.input.h + 2 * g.padding || g.kernel_w > self.input.w + 2 * g.padding
            {
                return bad(
                    "kernel",
                    format!(
                        "{}x{} larger than padded input {}x{}",
                        g.kernel_h,
                        g.kernel_w,
                        self.input.h + 2 * g.padding,
                        self.input.w + 2 * g.padding
                    ),
                );
            }
        }
        if let Some(p) = self.post.pool {
            let o = self.output_dims();
            if p.size == 0 || p.stride == 0 {
                return bad("pool", "size and stride must be >= 1".into());
            }
            if p.size > o.h || p.size > o.w {
                return bad("pool", format!("window {} larger than output {}x{}", p.size, o.h, o.w));
            }
        }
        if self.post.requant_shift > 31 {
            return bad("requant_shift", format!("{} > 31", self.post.requant_shift));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: FmapDims,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn alexnet() -> Self {
        Self::from_toml(ALEXNET_TOML).expect("bundled AlexNet description is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TmaError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawNetwork = toml::from_str(text).map_err(|e| TmaError::Parse(e.to_string()))?;
        raw.into_spec()
    }

    /// Same network with every layer forced to one precision.
    pub fn with_precision(mut self, mode: PrecisionMode) -> Self {
        for l in &mut self.layers {
            l.precision = mode;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(TmaError::Validation("network has no layers".into()));
        }
        let mut shape = self.input;
        for (i, l) in self.layers.iter().enumerate() {
            l.validate()?;
            let expected = match l.kind {
                LayerKind::Conv => shape,
                LayerKind::Fc => FmapDims::new(shape.len(), 1, 1),
            };
            if l.input != expected {
                return Err(TmaError::Validation(format!(
                    "layer '{}': input {:?} does not chain from {:?}",
                    l.name, l.input, expected
                )));
            }
            if !l.post.relu && i + 1 != self.layers.len() {
                return Err(TmaError::Validation(format!(
                    "layer '{}': relu = false is only allowed on the last layer",
                    l.name
                )));
            }
            shape = l.post_dims();
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNetwork {
    name: Option<String>,
    input: [i64; 3],
    precision: Option<String>,
    #[serde(default)]
    layer: Vec<RawLayer>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrTwo {
    One(i64),
    Two([i64; 2]),
}

impl OneOrTwo {
    fn pair(&self) -> [i64; 2] {
        match *self {
            OneOrTwo::One(v) => [v, v],
            OneOrTwo::Two(p) => p,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPool {
    size: i64,
    stride: i64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    name: Option<String>,
    kind: LayerKind,
    filters: Option<i64>,
    outputs: Option<i64>,
    kernel: Option<OneOrTwo>,
    stride: Option<OneOrTwo>,
    padding: Option<i64>,
    precision: Option<String>,
    relu: Option<bool>,
    requant_shift: Option<i64>,
    pool: Option<RawPool>,
}

fn positive(layer: &str, field: &str, v: i64) -> Result<usize> {
    if v < 1 {
        return Err(TmaError::Validation(format!(
            "layer '{layer}': field `{field}`: must be >= 1, got {v}"
        )));
    }
    Ok(v as usize)
}

fn non_negative(layer: &str, field: &str, v: i64) -> Result<usize> {
    if v < 0 {
        return Err(TmaError::Validation(format!(
            "layer '{layer}': field `{field}`: must be >= 0, got {v}"
        )));
    }
    Ok(v as usize)
}

fn precision(layer: &str, s: &str) -> Result<PrecisionMode> {
    PrecisionMode::parse(s).ok_or_else(|| {
        TmaError::Validation(format!(
            "layer '{layer}': field `precision`: expected int5 or int8, got {s:?}"
        ))
    })
}

impl RawNetwork {
    fn into_spec(self) -> Result<NetworkSpec> {
        let name = self.name.unwrap_or_else(|| "network".into());
        let [c, h, w] = self.input;
        let input = FmapDims::new(
            positive("<input>", "input", c)?,
            positive("<input>", "input", h)?,
            positive("<input>", "input", w)?,
        );
        let default_precision = match &self.precision {
            Some(p) => precision("<network>", p)?,
            None => PrecisionMode::Int8,
        };
        let mut layers = Vec::with_capacity(self.layer.len());
        let mut shape = input;
        for (i, raw) in self.layer.into_iter().enumerate() {
            let lname = raw.name.clone().unwrap_or_else(|| format!("layer{}", i + 1));
            let mode = match &raw.precision {
                Some(p) => precision(&lname, p)?,
                None => default_precision,
            };
            let post = PostOps {
                relu: raw.relu.unwrap_or(true),
                requant_shift: non_negative(&lname, "requant_shift", raw.requant_shift.unwrap_or(0))?
                    as u32,
                pool: match raw.pool {
                    Some(p) => Some(Pool {
                        size: positive(&lname, "pool.size", p.size)?,
                        stride: positive(&lname, "pool.stride", p.stride)?,
                    }),
                    None => None,
                },
            };
            let spec = match raw.kind {
                LayerKind::Conv => {
                    let filters = raw.filters.ok_or_else(|| {
                        TmaError::Validation(format!("layer '{lname}': missing field `filters`"))
                    })?;
                    let [kh, kw] = raw
                        .kernel
                        .ok_or_else(|| {
                            TmaError::Validation(format!("layer '{lname}': missing field `kernel`"))
                        })?
                        .pair();
                    let [sv, sh] = raw.stride.map(|s| s.pair()).unwrap_or([1, 1]);
                    let geometry = ConvGeometry {
                        kernel_h: positive(&lname, "kernel", kh)?,
                        kernel_w: positive(&lname, "kernel", kw)?,
                        stride_v: positive(&lname, "stride", sv)?,
                        stride_h: positive(&lname, "stride", sh)?,
                        padding: non_negative(&lname, "padding", raw.padding.unwrap_or(0))?,
                    };
                    LayerSpec::conv(&lname, shape, positive(&lname, "filters", filters)?, geometry, mode)
                        .with_post(post)
                }
                LayerKind::Fc => {
                    let outputs = raw.outputs.or(raw.filters).ok_or_else(|| {
                        TmaError::Validation(format!("layer '{lname}': missing field `outputs`"))
                    })?;
                    LayerSpec::fc(&lname, shape.len(), positive(&lname, "outputs", outputs)?, mode)
                        .with_post(post)
                }
            };
            spec.validate()?;
            shape = spec.post_dims();
            layers.push(spec);
        }
        let net = NetworkSpec {
            name,
            input,
            layers,
        };
        net.validate()?;
        Ok(net)
    }
}
