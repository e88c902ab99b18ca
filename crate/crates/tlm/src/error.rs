use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Errors surfaced by the command-line tools. Each variant maps to its own
/// process exit code.
#[derive(Debug, Error)]
pub enum TlmError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] tlm_core::Error),
}

impl TlmError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Self::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Io { .. } => 3,
            Self::Config(_) => 4,
            Self::Format { .. } => 5,
            Self::Core(_) => 6,
        }
    }
}

pub type Result<T, E = TlmError> = std::result::Result<T, E>;
