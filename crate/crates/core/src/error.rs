use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("label {label:?} is not in the {label_space} inventory")]
    UnknownLabel { label: String, label_space: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("split spec does not cover conversations: {}", ids.join(", "))]
    MissingSplit { ids: Vec<String> },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("unparseable response: {raw:?}")]
    UnparseableResponse { raw: String },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("tag mismatch: {0}")]
    TagMismatch(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True when the failure stems from bad user input (flags, config, data)
    /// rather than from a runtime condition.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::UnknownLabel { .. }
                | Error::Integrity(_)
                | Error::Domain(_)
                | Error::MissingSplit { .. }
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}
