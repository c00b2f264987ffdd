//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the percept library.
#[derive(Debug, Error)]
pub enum Error {
    /// Underlying I/O failure, annotated with the path where possible.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed or unsupported WAV data.
    #[error("wav: {0}")]
    Wav(String),

    /// Inputs whose shapes or rates do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Corrupt or incompatible serialized data (bitstream, checkpoint).
    #[error("stream: {0}")]
    Stream(String),

    /// A numeric failure such as divergence during training.
    #[error("numeric: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
