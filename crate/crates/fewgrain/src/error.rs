//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error. Variants map onto the CLI exit codes: configuration
/// and shape problems exit 2, data problems exit 3, numeric failures exit 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or flag usage.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset, manifest, or file-content problem.
    #[error("data error: {0}")]
    Data(String),
    /// Tensor dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),
    /// Non-finite value or solver failure.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
