use std::path::PathBuf;

/// Errors raised anywhere in the training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration key is missing, unknown, or out of range.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Stored data does not replay in its environment.
    #[error("data corruption: {0}")]
    DataCorruption(String),

    #[error("dataset generation failed: {0}")]
    DatasetGeneration(String),

    /// Exact enumeration would visit more nodes than allowed.
    #[error("exact enumeration refused: more than {budget} nodes")]
    BudgetExceeded { budget: usize },

    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFinite { epoch: usize, detail: String },

    /// A recorded content hash no longer matches the file on disk.
    #[error("integrity check failed for {path}: manifest has {expected}, file has {found}")]
    Integrity {
        path: String,
        expected: String,
        found: String,
    },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
