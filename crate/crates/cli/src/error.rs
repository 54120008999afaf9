use std::path::PathBuf;

use entroport::ErrorClass;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] entroport::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Input(String),
    #[error("every sweep point failed; first: {message}")]
    SweepFailed { message: String, class: ErrorClass },
    #[error("replay output `{file}` differs from the recorded run")]
    ReplayMismatch { file: String },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => class_code(e.class()),
            CliError::SweepFailed { class, .. } => class_code(*class),
            CliError::Io { .. } | CliError::Input(_) => 2,
            CliError::ReplayMismatch { .. } => 3,
        }
    }
}

fn class_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Input => 2,
        ErrorClass::Numerical => 3,
        ErrorClass::NonConvergence => 4,
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;
