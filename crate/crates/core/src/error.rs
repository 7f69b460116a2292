use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DffError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    TrainingDiverged { iteration: usize, detail: String },

    #[error("simulation diverged at step {step} (replica {replica})")]
    SimulationDiverged { step: usize, replica: usize },

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("corrupt file {path}: expected {expected} bytes, found {actual}")]
    Corruption {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("incompatible checkpoint, missing entries: {}", missing.join(", "))]
    Incompatible { missing: Vec<String> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("linear algebra failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DffError>;

pub(crate) fn invalid(msg: impl Into<String>) -> DffError {
    DffError::InvalidArgument(msg.into())
}
