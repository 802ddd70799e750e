//! Error taxonomy shared by every module.
//!
//! Each variant maps to one failure category so callers (and the CLI exit-code
//! mapping) can react without string matching.

use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or matrix dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid or inconsistent configuration values.
    #[error("config error: {0}")]
    Config(String),

    /// A documented API precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN/Inf or another numeric-domain failure detected in data or results.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed file contents; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }
}
