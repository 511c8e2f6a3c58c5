//! Error type shared by every module in the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Unified error for dataset loading, training, aggregation, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or models) that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An argument violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An IDX stream opens with the wrong magic number.
    #[error("{stream} stream: magic number {found:#010x}, expected {expected:#010x}")]
    IdxMagic {
        stream: &'static str,
        found: u32,
        expected: u32,
    },

    /// An IDX stream ends before the header-declared payload.
    #[error("{stream} stream truncated: need {needed} bytes, found {found}")]
    IdxTruncated {
        stream: &'static str,
        needed: usize,
        found: usize,
    },

    /// Image and label streams disagree on the example count.
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    /// A config file entry is missing, malformed, or out of range.
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    /// A filesystem operation failed; the path names the file involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Convenience constructor for [`Error::Io`] that captures the path.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
