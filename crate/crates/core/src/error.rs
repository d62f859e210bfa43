use std::io;

use thiserror::Error;

/// Errors raised by the rank metrics, chain simulators, network engine and
/// experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A unit's activation row is identically zero, so the normalization is
    /// undefined. This is the signature of total collapse.
    #[error("zero activation row {row} (layer {layer})")]
    ZeroRow { row: usize, layer: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),

    #[error("step size failure: {0}")]
    StepSize(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
