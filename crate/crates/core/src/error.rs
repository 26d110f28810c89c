//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller violated a documented precondition (shape mismatch, bad index, ...).
    #[error("input contract violated: {0}")]
    InputContract(String),

    /// A configuration value is invalid; the message names the offending field.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite values or other numeric breakdowns.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Dataset-level failure (missing class, undecodable file, bad manifest).
    #[error("data error: {0}")]
    Data(String),

    /// A referenced path could not be resolved.
    #[error("cannot resolve {path}: {reason}")]
    Resolution { path: PathBuf, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::InputContract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
