use std::fmt;

use crate::config::ConfigError;

/// CLI failure classes; they map onto exit codes 1 (usage) and 2 (runtime).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {msg}"),
            CliError::Runtime(msg) => write!(f, "runtime: {msg}"),
        }
    }
}

impl From<voxnn::Error> for CliError {
    fn from(e: voxnn::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;
