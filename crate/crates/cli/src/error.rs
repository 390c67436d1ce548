use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mcn_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Usage(String),

    #[error("{path} already exists (pass --force to overwrite)")]
    Exists { path: PathBuf },

    /// A numeric check ran to completion but failed its tolerance.
    #[error("{0}")]
    Tolerance(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// 1 for validation and configuration problems, 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Tolerance(_)
            | CliError::Core(mcn_core::Error::Numeric(_))
            | CliError::Core(mcn_core::Error::InvariantViolation(_)) => 2,
            _ => 1,
        }
    }
}
