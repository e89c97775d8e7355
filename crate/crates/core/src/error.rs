use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no interactions")]
    NoInteractions,

    #[error("{path}: unknown entity token `{token}`")]
    UnknownEntity { path: PathBuf, token: String },

    #[error("chronological split requires timestamps")]
    MissingTimestamps,

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unknown {kind} index {index}")]
    Lookup { kind: &'static str, index: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("training diverged at epoch {epoch}, step {step}: objective = {objective}")]
    Divergence { epoch: usize, step: usize, objective: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub(crate) fn data(message: impl Into<String>) -> Self {
        Error::Data(message.into())
    }
}
