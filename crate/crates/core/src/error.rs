use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("series too short: need {needed} rows, have {available}")]
    TooShort { needed: usize, available: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("index {index} out of range for {context} (size {size})")]
    OutOfRange {
        context: &'static str,
        index: usize,
        size: usize,
    },

    #[error("non-invertible RevIN affine: |gamma| = {0:e} on channel {1}")]
    SingularAffine(f64, usize),

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step} ({phase})")]
    NonFiniteLoss { step: usize, phase: String },

    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),

    #[error("LoRA adapters already attached")]
    LoraAttached,

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
