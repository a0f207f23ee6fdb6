use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::Span;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("document `{doc_id}`: invalid {field}: {message}")]
    Invariant {
        doc_id: String,
        field: String,
        message: String,
    },

    #[error("span {span} is invalid for a sentence of {len} tokens")]
    InvalidSpan { span: Span, len: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("scorer transport error: {0}")]
    Transport(String),

    #[error("scorer protocol violation: {0}")]
    Protocol(String),

    #[error("length mismatch: {left} predictions vs {right} gold labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the scorer connection or protocol.
    pub fn is_transport(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Protocol(_))
    }
}
