use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or axis sizes do not line up.
    #[error("{op}: dimension mismatch: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training diverged: a non-finite loss, or target embeddings that
    /// collapsed to zero and cannot enter the memory banks.
    #[error("training diverged at step {step} (batch seed {batch_seed}): {detail}")]
    Diverged {
        step: u64,
        batch_seed: u64,
        detail: String,
    },

    /// A persisted file does not follow the expected layout.
    #[error("malformed {kind} file {path:?}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

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

    pub(crate) fn format(kind: &'static str, path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            kind,
            path: path.into(),
            detail: detail.into(),
        }
    }
}
