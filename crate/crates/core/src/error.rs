use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NmixError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch { what: &'static str, expected: String, got: String },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl NmixError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NmixError::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        NmixError::DimensionMismatch { what, expected: expected.to_string(), got: got.to_string() }
    }
}

pub type Result<T> = std::result::Result<T, NmixError>;
