use std::path::{Path, PathBuf};

/// Failures surfaced by the file formats and the command-line tool.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad flags, bad config file or invalid settings. Exit code 1.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed or inconsistent input data. Exit code 2.
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] dae_core::Error),
    /// A check ran to completion and reported failure. Exit code 2.
    #[error("{0}")]
    Failed(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn usage(msg: impl std::fmt::Display) -> Self {
        Error::Usage(msg.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
