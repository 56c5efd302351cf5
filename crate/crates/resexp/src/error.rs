use std::path::PathBuf;

use resexp_core::error::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what} in {path}: {message}")]
    Format { what: &'static str, path: PathBuf, message: String },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("numerical failure: {0}")]
    Numeric(CoreError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const DEGENERATE: i32 = 4;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Invalid(_) | CliError::Format { .. } => exit::CONFIG,
            CliError::Diverged { .. } => exit::DIVERGED,
            CliError::Numeric(CoreError::NonFinite(_)) => exit::DIVERGED,
            _ => exit::FAILURE,
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::DivergedTraining { step } => CliError::Diverged { step },
            CoreError::InvalidConfig(m) | CoreError::InvalidCovariance(m) => CliError::Invalid(m),
            CoreError::BetaZero => CliError::Invalid("beta must be positive".into()),
            CoreError::ZeroMeanSignal => {
                CliError::Invalid("mean signal must be nonzero for the alignment bound".into())
            }
            other => CliError::Numeric(other),
        }
    }
}
