use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("index {index} out of range for {len} entries")]
    OutOfRange { index: usize, len: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("emotion detector unavailable: {0}")]
    DetectorUnavailable(String),

    #[error("concept graph is empty after ingest ({skipped} lines skipped)")]
    EmptyGraph { skipped: usize },

    #[error("non-finite loss at batch {batch}: generation={generation}, strategy={strategy}, pattern={pattern}")]
    NonFiniteLoss {
        batch: usize,
        generation: f64,
        strategy: f64,
        pattern: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown session {0}")]
    UnknownSession(String),

    #[error("model not loaded")]
    ModelNotLoaded,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short tag used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Tensor(_) => "tensor",
            Error::Record { .. } => "record",
            Error::UnknownStrategy(_) => "unknown_strategy",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::OutOfRange { .. } => "out_of_range",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::DetectorUnavailable(_) => "detector_unavailable",
            Error::EmptyGraph { .. } => "empty_graph",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::UnknownSession(_) => "unknown_session",
            Error::ModelNotLoaded => "model_not_loaded",
        }
    }
}
