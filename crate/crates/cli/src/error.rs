use thiserror::Error;

/// A failed command. The variant decides the process exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, config, or input data. Exit 2.
    #[error("{0}")]
    User(String),
    /// Estimation or numerical failure on valid input. Exit 3.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        CliError::User(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<dtr_core::Error> for CliError {
    fn from(e: dtr_core::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Numerical(e.to_string())
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
