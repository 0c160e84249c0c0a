//! Command-line pipelines for diffusion-feature change detection: synthetic
//! data, denoiser pretraining, change-detector training, evaluation and
//! inference, plus the JSON configuration and checkpoint formats they share.

pub mod checkpoint;
pub mod commands;
pub mod config;

use thiserror::Error;

/// Failure of a command, carrying its exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    /// 1 for I/O, 2 for usage or configuration, 3 for numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<diffcd::Error> for CliError {
    fn from(e: diffcd::Error) -> Self {
        use diffcd::Error as E;
        match e {
            E::Io { .. } | E::Load { .. } | E::Format(_) => CliError::Io(e.to_string()),
            E::NonFinite(_) => CliError::Numeric(e.to_string()),
            E::Shape(_) | E::Contract(_) | E::Config(_) => CliError::Usage(e.to_string()),
        }
    }
}
