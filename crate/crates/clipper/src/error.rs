//! Top-level error type and process exit codes.

use thiserror::Error;

/// Exit code for configuration errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for terminal backend failures.
pub const EXIT_BACKEND: i32 = 3;
/// Exit code for a missing prerequisite artifact (e.g. probe before categorize).
pub const EXIT_MISSING_ARTIFACT: i32 = 4;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),

    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),

    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),

    #[error(transparent)]
    Selector(#[from] crate::selector::SelectorError),

    #[error(transparent)]
    Ppl(#[from] crate::perplexity::PplError),

    #[error("missing prerequisite artifact: {0}")]
    MissingArtifact(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => EXIT_CONFIG,
            // capability mismatches are configuration problems, not outages
            Error::Backend(crate::backend::BackendError::Unsupported(_)) => EXIT_CONFIG,
            Error::Backend(_) => EXIT_BACKEND,
            Error::MissingArtifact(_) => EXIT_MISSING_ARTIFACT,
            Error::Selector(crate::selector::SelectorError::TauAboveR { .. }) => EXIT_CONFIG,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
