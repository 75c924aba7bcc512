//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("stale or missing training cache: {0}")]
    StaleCache(&'static str),

    #[error("insufficient data: need {need}, have {have}")]
    InsufficientData { need: usize, have: usize },

    #[error("trial evaluation grids are misaligned: {0}")]
    MisalignedTrials(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dims(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Process exit code per the CLI contract: config errors are distinguished
    /// from runtime/numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
