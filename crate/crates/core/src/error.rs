use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An invalid hyperparameter or model configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// Malformed user input (token sequences, manifests).
    #[error("input error: {0}")]
    Input(String),
    /// A step of the continual protocol was run out of order.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// A persisted file does not match its binary layout.
    #[error("format error: {0}")]
    Format(String),
    /// NaN or infinity produced by a numerical operation.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
