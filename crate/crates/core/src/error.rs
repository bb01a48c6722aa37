use thiserror::Error;

/// Failures when reading a GSMK container.
#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: not a GSMK container")]
    BadMagic,
    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: String, expected: u32 },
    #[error("truncated payload: {0}")]
    TruncatedPayload(String),
    #[error("malformed header: {0}")]
    Header(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged in {stage} at epoch {epoch}: {detail}")]
    Diverged {
        stage: String,
        epoch: usize,
        detail: String,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
