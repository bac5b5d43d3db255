use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// A rejected configuration entry. `key` names the offending setting when
/// one is to blame.
#[derive(Debug, Error, PartialEq)]
#[error("{}{}{message}", .key.as_ref().map(|k| format!("{k}: ")).unwrap_or_default(), .line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub key: Option<String>,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    pub fn key(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: Some(key.to_string()),
            line: None,
            message: message.into(),
        }
    }

    pub fn general(message: impl Into<String>) -> Self {
        Self {
            key: None,
            line: None,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },

    #[error("{0}")]
    Core(#[from] loopformer_core::Error),

    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for usage and configuration problems, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        use loopformer_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Core(E::Config(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
