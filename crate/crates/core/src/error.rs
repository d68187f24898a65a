//! Error type shared across the crate.
//!
//! Recoverable conditions (file formats, dataset loading, configuration,
//! divergent training runs) are reported through [`Error`]. Violations of
//! numeric-kernel contracts (shape mismatches, out-of-range labels, invalid
//! domains) panic with a descriptive message instead; they indicate caller
//! bugs, not runtime conditions.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A binary file did not match its declared format. `offset` is the byte
    /// position at which the problem was detected.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A dataset or checkpoint could not be loaded into a consistent state.
    #[error("load error: {0}")]
    Load(String),

    /// Invalid configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Underlying I/O failure, annotated with the path being accessed.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
