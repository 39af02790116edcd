use std::path::PathBuf;

use ral_core::Error;
use thiserror::Error as ThisError;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Check(String),

    #[error("io error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 0 ok, 1 check or usage failure, 2 numeric abort, 3 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Check(_) => 1,
            CliError::Io(..) => 3,
            CliError::Core(Error::NonFinite { .. }) => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(_) => 1,
        }
    }
}
