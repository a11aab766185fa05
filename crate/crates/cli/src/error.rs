//! Command-level errors with stable exit codes: 0 ok, 2 configuration,
//! 3 divergence, 4 i/o.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    Io(String),
    Other(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {}", m),
            CliError::Divergence(m) => write!(f, "training diverged: {}", m),
            CliError::Io(m) => write!(f, "i/o error: {}", m),
            CliError::Other(m) => write!(f, "error: {}", m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<miai_core::Error> for CliError {
    fn from(e: miai_core::Error) -> Self {
        match e {
            miai_core::Error::Divergence(m) => CliError::Divergence(m),
            miai_core::Error::Io(m) => CliError::Io(m.to_string()),
            miai_core::Error::Format(m) => CliError::Io(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
