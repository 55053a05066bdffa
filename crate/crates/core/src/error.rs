use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated the documented preconditions of an operation.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("matrix is not positive semi-definite (failed even with jitter {max_jitter:e})")]
    NotPositiveSemidefinite { max_jitter: f64 },

    /// A file could not be decoded. `offset` is the byte (or line, for CSV) where decoding stopped.
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("non-finite gradient in tensor {tensor} at index {index}")]
    NonFiniteGradient { tensor: usize, index: usize },

    #[error("training diverged at {stage} epoch {epoch}: {message}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        message: String,
    },

    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
