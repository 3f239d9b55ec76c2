use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// Load errors for the binary formats are kept distinct so callers (and the
/// CLI exit-code mapping) can tell a corrupted file from a version skew.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("inconsistent dimensions: {0}")]
    InconsistentDims(String),

    #[error("corruption: {0}")]
    Corruption(String),

    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),

    #[error("no positions evaluated")]
    NoPositionsEvaluated,

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Data errors are problems with inputs on disk (as opposed to misuse of
    /// the API or bad flags).
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Contract(_))
    }

    /// Fingerprint mismatches are reported but need not abort a pipeline.
    pub fn is_warning(&self) -> bool {
        matches!(self, Error::FingerprintMismatch(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimMismatch { expected, actual });
    }
    Ok(())
}
