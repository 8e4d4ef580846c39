use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const IO: i32 = 2;
    pub const INTEGRITY: i32 = 3;
    pub const USAGE: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] timeflow_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: integrity check failed: {reason}")]
    Integrity { path: PathBuf, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error("output directory {0} is locked by another run (remove the .lock file if stale)")]
    Locked(PathBuf),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use timeflow_core::Error as E;
        match self {
            CliError::Io { .. } | CliError::Locked(_) => exit::IO,
            CliError::Integrity { .. } => exit::INTEGRITY,
            CliError::Usage(_) => exit::USAGE,
            CliError::Core(e) => match e {
                E::Io { .. } | E::Parse { .. } | E::Data(_) => exit::IO,
                E::Config(_) | E::Contract(_) | E::Dimension { .. } => exit::USAGE,
                E::Numeric(_) => exit::INTERNAL,
            },
        }
    }
}
