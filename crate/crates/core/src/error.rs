use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CladError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CladError {
    /// A tensor shape did not match what an operation expected.
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        found: String,
    },
    /// The caller violated an operation's contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// Input data violates a structural invariant (missing masks, corrupt checkpoint, ...).
    #[error("integrity error: {0}")]
    Integrity(String),
    /// A file could not be decoded.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    /// An operation produced NaN or an infinity from finite inputs.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CladError {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        CladError::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        CladError::Usage(msg.into())
    }

    pub(crate) fn integrity(msg: impl Into<String>) -> Self {
        CladError::Integrity(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CladError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CladError::Usage(_) => 2,
            _ => 1,
        }
    }
}
