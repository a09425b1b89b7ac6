use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("ingestion error at line {line}: {msg}")]
    Ingest { line: usize, msg: String },
    #[error("record {id}: {msg}")]
    Record { id: String, msg: String },
    #[error("batch error: {0}")]
    Batch(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that come from numbers rather than inputs or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::Divergence(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
