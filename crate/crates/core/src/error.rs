use std::path::PathBuf;

/// Errors raised by the alignment library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("matrix has no singular value above the truncation threshold")]
    RankZero,
    #[error("invalid rank: requested {requested}, available {available}")]
    InvalidRank { requested: usize, available: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("correspondence error: {0}")]
    Correspondence(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("unknown space `{0}`")]
    Lookup(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
