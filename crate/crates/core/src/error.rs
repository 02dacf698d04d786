use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Model output did not follow the contracted format. Records hitting this are filtered.
    #[error("format error: {0}")]
    Format(String),

    #[error("replay cache miss for request digest {digest}")]
    CacheMiss { digest: String },

    #[error("backend error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Backend { status: Option<u16>, message: String },

    #[error("generation failed after {attempts} attempt(s): {}", reasons.join("; "))]
    GenerationFailed { attempts: usize, reasons: Vec<String> },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("score parse error: {message}; offending line(s): {lines:?}")]
    ScoreParse { message: String, lines: Vec<String> },

    #[error("sandbox environment error: {0}")]
    SandboxEnvironment(String),

    #[error("dataset at {} is incomplete (no manifest)", path.display())]
    IncompleteDataset { path: PathBuf },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
