use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_WATCHDOG: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error(transparent)]
    Numeric(#[from] cvar_core::Error),

    /// Outputs were written, but at least one chain tripped the α watchdog.
    #[error("α watchdog fired: {0}")]
    Watchdog(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use cvar_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io { .. } | CliError::Data { .. } => EXIT_USAGE,
            CliError::Numeric(E::Parameter(_) | E::Dimension { .. } | E::InsufficientData { .. }) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Watchdog(_) => EXIT_WATCHDOG,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
