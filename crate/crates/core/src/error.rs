//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Encoder emitted an (almost) all-zero symbol block; power
    /// normalization is undefined. Training substitutes a perturbed vector.
    #[error("symbol vector is all zeros (norm < 1e-12), cannot normalize power")]
    AllZeroInput,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid realization count m = {0}, must be >= 1")]
    InvalidM(usize),

    #[error("negative MSE value {0}")]
    NegativeMse(f64),

    #[error("dataset not found: {0}")]
    DatasetNotFound(String),

    #[error("corrupt dataset archive: {0}")]
    CorruptArchive(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },

    #[error("checkpoint schema version mismatch: supported {supported}, found {found}")]
    SchemaVersionMismatch { supported: u32, found: u32 },

    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("model configurations do not match: {0}")]
    ConfigMismatch(String),

    #[error("result grids do not match: {0}")]
    GridMismatch(String),

    #[error("no result rows to process")]
    EmptyResults,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
