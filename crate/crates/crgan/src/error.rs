use std::path::PathBuf;

/// Result alias for the `crgan` crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by training, IO and orchestration.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] crgan_core::Error),
    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    /// A loss or activation went NaN or infinite during training.
    #[error("non-finite {term} at iteration {iteration} (batch indices {batch:?})")]
    NonFinite {
        term: String,
        iteration: u64,
        batch: Vec<usize>,
    },
    #[error("missing {what} at {path}; run `crgan {producer}` first")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        producer: &'static str,
    },
    #[error("config hash mismatch: {0}")]
    HashMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Self::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::NonFinite { .. } | Self::Core(crgan_core::Error::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}
