//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by gnnkit operations.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix/vector dimensions do not line up for the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape {
        /// Name of the operation that failed.
        op: &'static str,
        /// Human-readable description of the mismatch.
        detail: String,
    },

    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Dataset files are missing, malformed, or internally inconsistent.
    #[error("data error: {0}")]
    Data(String),

    /// Training produced a non-finite loss or parameter.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Convenient result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
