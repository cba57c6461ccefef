use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("non-finite value at step {step}{}", .row.map(|r| format!(" (batch row {r})")).unwrap_or_default())]
    NonFinite { step: usize, row: Option<usize> },

    #[error("training diverged at step {step}: loss {loss} exceeded 10x initial loss {initial} for 100 consecutive steps")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("accuracy gate failed: held-out accuracy {accuracy:.4} < {required:.2}")]
    AccuracyGate { accuracy: f64, required: f64 },

    #[error("artifact verification failed: {0}")]
    Verification(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Machine-readable error kind used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::Diverged { .. } => "diverged",
            Error::MissingInput(_) => "missing-input",
            Error::Checkpoint(_) => "checkpoint",
            Error::AccuracyGate { .. } => "accuracy-gate",
            Error::Verification(_) => "verification",
            Error::Internal(_) => "internal",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    /// Process exit code: 2 usage/input, 3 numerical, 4 acceptance gate.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Diverged { .. } => 3,
            Error::AccuracyGate { .. } => 4,
            Error::Internal(_) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
