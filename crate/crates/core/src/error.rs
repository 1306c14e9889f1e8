use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot draw {users} distinct BPSK pilots of length {pilot_len}")]
    InfeasiblePilots { users: usize, pilot_len: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("enumeration of {candidates} supports exceeds the limit of {limit}")]
    CombinatorialBudget { candidates: u128, limit: u128 },

    #[error("header mismatch: {0}")]
    Header(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged at batch {batch}: loss = {loss}")]
    Divergence { batch: u64, loss: f64 },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
