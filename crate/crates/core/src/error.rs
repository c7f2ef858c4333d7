use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

pub type Result<T, E = AmaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AmaError {
    /// Invalid or inconsistent configuration; `key` names the offending field
    /// when there is one.
    #[error("configuration error{}: {message}", key.as_ref().map(|k| format!(" in `{k}`")).unwrap_or_default())]
    Config { key: Option<String>, message: String },

    #[error("data error at {}: {message}", path.display())]
    Data { path: PathBuf, message: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A caller broke a shape or mode precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, step {step}: {breakdown}")]
    Divergence {
        epoch: usize,
        step: usize,
        breakdown: Box<LossBreakdown>,
    },
}

impl AmaError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        AmaError::Config {
            key: Some(key.into()),
            message: message.into(),
        }
    }

    pub fn config_general(message: impl Into<String>) -> Self {
        AmaError::Config {
            key: None,
            message: message.into(),
        }
    }

    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        AmaError::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AmaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        AmaError::Contract(message.into())
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            AmaError::Config { .. } | AmaError::Contract(_) | AmaError::Numeric(_) => 2,
            AmaError::Data { .. } | AmaError::Io { .. } => 3,
            AmaError::Divergence { .. } => 4,
        }
    }
}
