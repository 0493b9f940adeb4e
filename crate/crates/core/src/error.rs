use std::path::PathBuf;

/// Errors raised by the training and verification stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed caller input (token out of range, bad shapes, t outside [0,1], ...).
    #[error("input error: {0}")]
    Input(String),
    /// A non-finite value appeared; `context` names the layer or step.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },
    /// Inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Request exceeds what an exact routine can enumerate.
    #[error("capability error: {0}")]
    Capability(String),
    /// A probability table violates a support requirement.
    #[error("domain error: {0}")]
    Domain(String),
    /// Instance generator could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
