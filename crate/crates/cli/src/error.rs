use std::fmt;

use perfusion_enkf::Error;

/// Failure of a command, split by exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// bad flags, config, spec or input files (exit 2)
    Validation(String),
    /// a computation broke down (exit 3)
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    /// Classifies a library error, prefixing `context` to the message.
    pub fn from_core(context: impl fmt::Display, e: Error) -> Self {
        let msg = format!("{context}: {e}");
        match e {
            Error::NotFactorizable { .. } | Error::DomainError(_) => CliError::Numerical(msg),
            _ => CliError::Validation(msg),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NotFactorizable { .. } | Error::DomainError(_) => CliError::Numerical(msg),
            _ => CliError::Validation(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
