//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for tensor math, networks, data handling and training.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is invalid or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input file is malformed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Checkpoint file problems, each kind kept distinct.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    /// A numeric guard tripped (divergence, non-finite values).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while reading or writing checkpoint files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
