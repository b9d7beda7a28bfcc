use thiserror::Error;

pub type Result<T> = std::result::Result<T, TmaError>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TmaError {
    #[error("{what} = {value} outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: i64,
        min: i64,
        max: i64,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("expected {expected} operands, got {got}")]
    OperandCount { expected: usize, got: usize },
    #[error("unsupported layer: {0}")]
    Unsupported(String),
    #[error("FIFO overflow on queue (row {row}, depth {depth}): capacity {capacity}")]
    FifoOverflow {
        row: usize,
        depth: usize,
        capacity: usize,
    },
    #[error("FIFO underflow on queue (row {row}, depth {depth})")]
    FifoUnderflow { row: usize, depth: usize },
    #[error("SRAM access out of bounds: region {region}, offset {offset}, count {count}, extent {extent}")]
    OutOfBounds {
        region: String,
        offset: usize,
        count: usize,
        extent: usize,
    },
    #[error("SRAM capacity exceeded: {requested} bytes requested, {capacity} available")]
    Capacity { requested: usize, capacity: usize },
    #[error("unknown SRAM region {0}")]
    UnknownRegion(String),
    #[error("Psum at index {index} of layer {layer} loaded before it was stored")]
    PsumMissing { layer: usize, index: usize },
    #[error("value {value} does not fit the {bits}-bit {what}")]
    Width {
        what: &'static str,
        value: i64,
        bits: u32,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid network: {0}")]
    Validation(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("at index {index:?}: {source}")]
    AtIndex {
        index: Vec<usize>,
        #[source]
        source: Box<TmaError>,
    },
    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<TmaError>,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

impl TmaError {
    pub fn in_layer(self, layer: &str) -> Self {
        TmaError::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by malformed user input rather than a failed check.
    pub fn is_input_error(&self) -> bool {
        match self {
            TmaError::Verification(_) => false,
            TmaError::Layer { source, .. } | TmaError::AtIndex { source, .. } => {
                source.is_input_error()
            }
            _ => true,
        }
    }
}

impl From<std::io::Error> for TmaError {
    fn from(e: std::io::Error) -> Self {
        TmaError::Io(e.to_string())
    }
}
