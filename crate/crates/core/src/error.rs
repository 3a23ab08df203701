use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: dimension mismatch (expected {expected}, got {got})")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("{op}: input contains a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{op}: Gram matrix is numerically singular (condition {condition:.3e}); add eps*I regularization before projecting")]
    Singular { op: &'static str, condition: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
