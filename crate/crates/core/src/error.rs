use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or inconsistent input (dimension mismatch, invalid parameters, unknown class).
    #[error("invalid input: {0}")]
    Input(String),

    /// An operation evaluated outside its mathematical domain (e.g. a score at sigma = 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// The ODE solver produced a non-finite state.
    #[error("solver diverged at step {step}{}", chain.map(|c| format!(" (chain {c})")).unwrap_or_default())]
    SolverDivergence { chain: Option<usize>, step: usize },

    /// A consistency check on an internally generated table failed.
    #[error("internal error: {0}")]
    Internal(String),

    /// Every candidate of a search failed to evaluate.
    #[error("search failed: {0}")]
    Search(String),

    /// A sweep journal exists but cannot be used to resume.
    #[error("cannot resume from {path}: {reason}")]
    ResumeConflict { path: PathBuf, reason: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    /// Attach a chain index to a solver divergence.
    pub fn with_chain(self, chain: usize) -> Self {
        match self {
            Error::SolverDivergence { step, .. } => Error::SolverDivergence {
                chain: Some(chain),
                step,
            },
            other => other,
        }
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
