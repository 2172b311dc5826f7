use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// Malformed binary container.
    #[error("{context}: format error at byte {offset}: {message}")]
    Format {
        context: String,
        offset: u64,
        message: String,
    },
    /// Malformed or invalid line in a text input.
    #[error("{}:{line}: {message}", path.display())]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Core(#[from] adaptlab_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint refused: {0}")]
    Refused(String),
    #[error("{0}")]
    Locked(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn line(path: impl AsRef<Path>, line: usize, message: impl Into<String>) -> Self {
        Self::Line {
            path: path.as_ref().to_path_buf(),
            line,
            message: message.into(),
        }
    }

    /// 4 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(adaptlab_core::Error::NonFiniteLoss(_))
            | Self::Core(adaptlab_core::Error::NonFiniteGradient(_)) => exit::NUMERICAL,
            _ => exit::USAGE,
        }
    }
}

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const RESUMABLE: i32 = 3;
    pub const NUMERICAL: i32 = 4;
}
