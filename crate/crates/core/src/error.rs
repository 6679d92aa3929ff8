use thiserror::Error;

/// Errors produced by the adapref library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scaling factor {tau} outside feasible interval [{lo}, {hi}]")]
    TauOutOfRange { tau: f64, lo: f64, hi: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("non-finite loss at pair {pair} (epoch {epoch})")]
    NonFiniteLoss { pair: usize, epoch: usize },

    #[error("degenerate ground truth: {0}")]
    DegenerateGroundTruth(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format mismatch: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
