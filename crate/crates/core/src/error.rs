//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A value that must be finite was NaN or infinite.
    #[error("non-finite {name}: {value}")]
    NonFinite { name: &'static str, value: f64 },

    /// A hyperparameter or configuration value is outside its valid range.
    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    /// A call-level argument error (bad index combination, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Prompt or response index outside the policy's vocabulary.
    #[error("unknown {kind} index {index} (vocabulary size {len})")]
    UnknownIndex {
        kind: &'static str,
        index: usize,
        len: usize,
    },

    /// Pessimism calibration could not reach the target within the
    /// iteration budget; carries the best fraction achieved.
    #[error(
        "calibration failed: target {target} unreachable, best achieved {best} \
         at misalignment {misalignment}"
    )]
    Calibration {
        target: f64,
        best: f64,
        misalignment: f64,
    },

    /// Non-finite loss or gradient during training, with the step index and
    /// the dataset indices of the offending records.
    #[error("training failed at step {step}: {reason} (records {record_ids:?})")]
    Training {
        step: u64,
        record_ids: Vec<usize>,
        reason: String,
    },

    /// Malformed world/dataset/checkpoint file.
    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn non_finite(name: &'static str, value: f64) -> Self {
        Error::NonFinite { name, value }
    }

    pub(crate) fn invalid_param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name,
            reason: reason.into(),
        }
    }
}
