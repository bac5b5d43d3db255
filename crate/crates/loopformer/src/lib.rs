//! Files, configuration and commands around `loopformer-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod files;
pub mod run;

pub use config::RunConfig;
pub use error::{CliError, ConfigError, Result};
