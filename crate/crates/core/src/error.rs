use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the registration pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate descriptor for part {part}: interpolated feature norm is zero")]
    DegenerateDescriptor { part: usize },

    #[error("non-finite objective at scale {scale}, iteration {iteration}")]
    NonFinite { scale: f64, iteration: usize },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Parse failures for the binary and text file formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0}")]
    Trailing(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("invalid document: {0}")]
    Document(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
