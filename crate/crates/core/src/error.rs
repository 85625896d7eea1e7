//! Crate-wide error types.
//!
//! Format errors keep distinct variants so callers (and the CLI exit-code
//! table) can tell a corrupt file from a mis-shaped one.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("{0}")]
    Format(#[from] FormatError),

    /// Filtering left no usable evaluation images; callers must handle this
    /// explicitly rather than observing an empty set.
    #[error("empty evaluation set: no image is correctly classified by every model")]
    EmptyEvalSet,

    /// A metric over fooled samples was requested but nothing was fooled.
    #[error("no successful attacks in this run")]
    NoSuccessfulAttacks,

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    /// A matrix that must be row-stochastic is not.
    #[error("integrity: {0}")]
    Integrity(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("checkpoint magic mismatch")]
    MagicMismatch,

    #[error("checkpoint crc mismatch")]
    CrcMismatch,

    #[error("parameter shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checkpoint metadata: {0}")]
    Meta(String),

    #[error("cifar-10 binary: {0}")]
    Cifar(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
