use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    /// Names of the checks that failed.
    #[error("verification failed: {}", .0.join(", "))]
    Verification(Vec<String>),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Verification(_) => 4,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<lqport::Error> for CliError {
    fn from(e: lqport::Error) -> Self {
        use lqport::Error as E;
        let msg = e.to_string();
        match e {
            E::Argument(_) => CliError::Usage(msg),
            E::Data(_) | E::Format(_) | E::Io(_) => CliError::Data(msg),
            E::Numerical(_)
            | E::Resource(_)
            | E::Instability(_)
            | E::Divergence { .. }
            | E::Precondition(_)
            | E::Optimization(_) => CliError::Numerical(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
