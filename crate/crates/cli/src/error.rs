use std::process::ExitCode;

use thiserror::Error;

/// Failure classes, each with its own exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0} inconsistent labeling(s)")]
    Inconsistent(usize),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Inconsistent(_) => 5,
        })
    }
}

impl From<hiu_core::Error> for CliError {
    fn from(e: hiu_core::Error) -> Self {
        match e {
            hiu_core::Error::NonFinite(_) | hiu_core::Error::Diverged(_) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches a path to an I/O or parse failure.
pub fn data_err(path: &std::path::Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}
