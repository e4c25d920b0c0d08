use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("backward requires a 1x1 root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("backward already ran on this graph; rebuild the forward pass first")]
    BackwardTwice,

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("set encoder needs at least one (x, y) pair")]
    EmptySet,

    #[error("insufficient points for split: need {required}, have {available}")]
    InsufficientPoints { required: usize, available: usize },

    #[error("cholesky factorization failed for a {size}x{size} kernel (jitter {jitter:e})")]
    Cholesky { size: usize, jitter: f64 },

    #[error("idx parse error at byte {offset}: {message}")]
    Idx { offset: usize, message: String },

    #[error("candidate pool exhausted after {acquired} acquisitions")]
    PoolExhausted { acquired: usize },

    #[error("model kind {0} needs the full task set during training")]
    MissingFullSet(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
