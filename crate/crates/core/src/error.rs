use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, divisibility or ranges that make a configuration unusable.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data that violates a type invariant (non-binary mask, shape mismatch, ...).
    #[error("validation error: {0}")]
    Validation(String),
    /// Non-finite values or singular arithmetic.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<S: Into<String>>(msg: S) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn validation<S: Into<String>>(msg: S) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn numeric<S: Into<String>>(msg: S) -> Error {
    Error::Numeric(msg.into())
}
