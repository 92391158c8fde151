use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("normalization statistics: {0}")]
    Stats(String),
    #[error("record {index}: {message}")]
    Parse { index: usize, message: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step} (batch seed {batch_seed}): {message}")]
    Diverged {
        step: usize,
        batch_seed: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
