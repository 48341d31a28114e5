//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by graph construction, losses, data handling, training and
/// evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's contract (bad shape, bad index,
    /// non-finite value, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration is inconsistent or cannot be satisfied by the data.
    #[error("configuration error: {0}")]
    Config(String),

    /// A manifest or other text input failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Input data is structurally invalid beyond a single line.
    #[error("data error: {0}")]
    Data(String),

    /// A non-finite value surfaced where the computation requires finite ones.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An evaluation protocol could not be carried out on the given data.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A checkpoint was written by an incompatible format version.
    #[error("checkpoint version mismatch: file has version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
