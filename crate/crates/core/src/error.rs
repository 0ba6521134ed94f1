use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants mirror the failure classes callers need to tell apart: bad
/// shapes, bad configuration, bad data, API misuse, unparsable input and
/// numerical blow-ups.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Tags a numerical failure with the epoch (or update) it happened in;
    /// other errors pass through unchanged.
    pub fn at_epoch(self, epoch: usize) -> Self {
        match self {
            Error::NonFinite { op } => Error::Diverged {
                epoch,
                detail: format!("non-finite value produced by {op}"),
            },
            other => other,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Diverged { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
