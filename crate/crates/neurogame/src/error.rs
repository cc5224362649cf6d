use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the numeric and coalition machinery.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument to {op}: {details}")]
    InvalidArg { op: &'static str, details: String },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("iteration index must be >= 1, got {0}")]
    IterationRange(f64),

    #[error("activation {value} below the configuration-state floor {floor}")]
    ActivationFloor { value: f64, floor: f64 },

    #[error("coalition block {block_rows}x{block_cols} larger than map {rows}x{cols}")]
    BlockTooLarge {
        block_rows: usize,
        block_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("{n} players exceed the exact-Shapley guard of {guard}; use Monte Carlo or raise the limit")]
    ShapleyGuard { n: usize, guard: usize },

    #[error("subset member index {index} out of range for coalition of {n}")]
    MemberRange { index: usize, n: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("model has no coalition-gated layers")]
    NoGatedLayers,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, details: impl Into<String>) -> Self {
        Error::InvalidArg {
            op,
            details: details.into(),
        }
    }
}
