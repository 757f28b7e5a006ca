//! Error taxonomy shared by every module.
//!
//! The variants map onto the CLI exit codes: config errors exit 2,
//! artifact/IO errors exit 3, numeric/contract errors exit 4.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between tensor operands.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN/Inf surfaced, an iteration failed to converge, or a numeric
    /// guard tripped.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller violated an operation contract (non-scalar loss,
    /// non-orthonormal subspace, conflicting hooks, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Unknown concept, token, or task name.
    #[error("domain error: {0}")]
    Domain(String),

    /// Dataset generation could not produce the requested prompts.
    #[error("generation error: {0}")]
    Generation(String),

    /// Counterfactual pair sampling ran out of eligible prompts.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Conflicting or invalid hook specifications.
    #[error("hook error: {0}")]
    Hook(String),

    /// Training diverged or could not start.
    #[error("training error: {0}")]
    Training(String),

    /// A persisted artifact is corrupt or inconsistent. `offset` is the
    /// byte position at which the violation was detected, when known.
    #[error("artifact error at byte {offset:?}: {message}")]
    Artifact { message: String, offset: Option<u64> },

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn artifact(message: impl Into<String>) -> Self {
        Error::Artifact { message: message.into(), offset: None }
    }

    pub fn artifact_at(message: impl Into<String>, offset: u64) -> Self {
        Error::Artifact { message: message.into(), offset: Some(offset) }
    }

    /// Exit code for the CLI: 2 config, 3 artifact, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Artifact { .. } | Error::Io(_) | Error::Json(_) => 3,
            Error::Dimension(_)
            | Error::Numeric(_)
            | Error::Contract(_)
            | Error::Domain(_)
            | Error::Generation(_)
            | Error::Sampling(_)
            | Error::Hook(_)
            | Error::Training(_) => 4,
        }
    }
}
