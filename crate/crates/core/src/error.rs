use std::path::PathBuf;

use crate::volume::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("subvolume at origin {origin:?} with side {side} does not fit in dims {dims:?}")]
    OutOfBounds {
        origin: [usize; 3],
        side: usize,
        dims: Dims,
    },

    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u32),

    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },

    #[error("file has {0} unexpected trailing bytes")]
    TrailingData(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value {value} at index {index}")]
    NonFiniteValue { index: usize, value: f32 },

    #[error("probability {0} outside [0, 1)")]
    InvalidProbability(f64),

    #[error("dims {dims:?} not divisible by {factor}")]
    NonDivisibleDims { dims: Dims, factor: usize },

    #[error("unsupported MeshNet variant {0} (expected 64 or 68)")]
    InvalidVariant(usize),

    #[error("subvolume side {side} exceeds volume dims {dims:?}")]
    SubvolumeTooLarge { side: usize, dims: Dims },

    #[error("class index {label} out of range for {num_classes} classes")]
    ClassOutOfRange { label: usize, num_classes: usize },

    #[error("non-finite loss at batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },

    #[error("plan dims {plan:?} do not match volume dims {volume:?}")]
    PlanMismatch { plan: Dims, volume: Dims },

    #[error("vote accumulator has {0} voxels without any vote")]
    EmptyAccumulator(usize),

    #[error("{metric} undefined for class {class}")]
    UndefinedMetric { metric: &'static str, class: usize },

    #[error("config field `{field}`: {message}")]
    ConfigField { field: String, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::ConfigField {
            field: field.into(),
            message: message.into(),
        }
    }
}
