use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A binary input (dataset, embedding table, checkpoint) is malformed.
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shape mismatch, missing forward pass, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no stored embedding for example {0}")]
    MissingEmbedding(usize),

    #[error("reservoir initialization failed: stream exhausted before classes {missing:?} were filled")]
    Initialization { missing: Vec<usize> },

    #[error("unknown method id `{0}` (expected one of HT, ARF, RBC, DBC)")]
    UnknownMethod(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
