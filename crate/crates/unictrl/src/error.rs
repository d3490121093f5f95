use std::io;
use std::path::{Path, PathBuf};

use crate::checkpoint::CheckpointError;

/// Everything a command can fail with.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] unictrl_core::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl ToString) -> Self {
        Self::Format {
            path: path.as_ref().to_path_buf(),
            msg: msg.to_string(),
        }
    }

    /// Stable machine-readable category, printed as `error[<category>]`.
    pub fn category(&self) -> &'static str {
        match self {
            Self::Core(e) => e.category(),
            Self::Checkpoint(e) => e.category(),
            Self::Io { .. } => "io",
            Self::Format { .. } => "format",
            Self::Usage(_) => "usage",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
