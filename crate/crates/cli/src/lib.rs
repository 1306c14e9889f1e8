//! Command implementations behind the `csmud` executable.

pub mod check;
pub mod commands;
pub mod config;

use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Missing(String),

    #[error("interrupted; latest best checkpoint saved to {0}")]
    Interrupted(String),

    #[error("{0}")]
    Failed(String),

    #[error(transparent)]
    Core(#[from] csmud_core::Error),
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 3 for missing
    /// models or datasets, 130 after Ctrl-C, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        use csmud_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Interrupted(_) => 130,
            CliError::Failed(_) => 1,
            CliError::Core(e) => match e {
                E::Config(_) | E::InfeasiblePilots { .. } | E::CombinatorialBudget { .. } => 2,
                E::MissingArtifact(_) => 3,
                _ => 1,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}
