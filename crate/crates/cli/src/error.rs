use thiserror::Error;

/// Failures of a CLI command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, bad arguments or unreadable input (exit 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// A run failed numerically (exit 3).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Output could not be written (exit 3).
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) | CliError::Io(_) | CliError::Csv(_) => 3,
        }
    }
}

impl From<gnpolicy::Error> for CliError {
    fn from(e: gnpolicy::Error) -> Self {
        match e {
            gnpolicy::Error::InvalidModel(msg) => CliError::Config(msg),
            other => CliError::Numerical(other.to_string()),
        }
    }
}
