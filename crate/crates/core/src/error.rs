use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A matrix that must be positive semi-definite was not.
    #[error("numerical domain error at pixel ({x}, {y}): {reason}")]
    NumericalDomain { x: usize, y: usize, reason: String },
    #[error("numerical blowup at step {step}: max |update| = {max_update:e}")]
    Blowup { step: usize, max_update: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
