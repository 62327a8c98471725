//! Error type shared by every module in the crate.

use thiserror::Error;

/// Unified error for mesh validation, numerics, I/O, and the remote oracle.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data failed structural validation (bad indices, degenerate
    /// faces, shape mismatches, out-of-range arguments).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration file or CLI flag could not be interpreted.
    #[error("configuration error: {0}")]
    Config(String),

    /// Numerical failure: singular systems, non-finite values, divergence,
    /// or a verification tolerance breach.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Filesystem or encoding problem.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization problem.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Image decode/encode problem.
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    /// The remote denoiser could not be reached or answered malformed data.
    #[error("remote oracle error: {0}")]
    Remote(String),
}

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Convenience constructor for invalid-input errors.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Convenience constructor for numerical failures.
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Convenience constructor for configuration problems.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code the CLI maps this error to: config and I/O problems
    /// exit 2, numerical failures exit 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 1,
            _ => 2,
        }
    }
}
