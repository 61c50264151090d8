//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FtsneError {
    /// A user-supplied parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A data row cannot be processed (e.g. all pairwise distances zero).
    #[error("degenerate input at row {row}: {reason}")]
    DegenerateInput { row: usize, reason: String },

    /// Argument outside the mathematical domain of a divergence function.
    #[error("{divergence}: {what} outside domain (got {value})")]
    Domain {
        divergence: String,
        what: &'static str,
        value: f64,
    },

    /// The requested divergence has no conjugate-dual form.
    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    /// A NaN/Inf appeared mid-run; `step` is the epoch or round index and
    /// `last_good` holds the most recent finite coordinates.
    #[error("numeric abort at step {step}: {reason}")]
    NumericAbort {
        step: usize,
        reason: String,
        last_good: Option<Box<crate::matrix::Mat>>,
    },

    /// Generic numeric failure outside an optimizer loop.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed input file.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FtsneError>;
