use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backend failure for question {question_id}: {message}")]
    Backend {
        question_id: String,
        message: String,
        retriable: bool,
    },

    #[error("backend returned empty generations for question {question_id} after {attempts} attempts")]
    EmptyGeneration { question_id: String, attempts: usize },

    #[error("backend contract violated: {0}")]
    Contract(String),

    #[error("token {token:?} is not in the vocabulary of backend {backend}")]
    MissingToken { backend: String, token: String },

    #[error("equivalence judge at {endpoint} is unavailable")]
    JudgeUnavailable { endpoint: String },

    #[error("feature dimension mismatch at example {index}: expected {expected}, found {found}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss {loss} exceeds {limit}")]
    Diverged {
        step: usize,
        loss: f64,
        limit: f64,
        /// Loss of every step up to and including the failing one.
        history: Vec<f64>,
    },

    #[error("unpaired questions: {0:?}")]
    Unpaired(Vec<String>),

    #[error("malformed {what}: {message}")]
    Format { what: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
