use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("correlation table rejected: {0}")]
    InvalidTable(String),

    #[error("coefficient references an entry that is not bound to data: {0}")]
    UnboundEntry(String),

    #[error("matrix is not Hermitian (asymmetry {0:.3e})")]
    NotHermitian(f64),

    #[error("invalid realization: {0}")]
    InvalidRealization(String),

    #[error("span did not saturate after {batches} batches (rank trace {trace:?})")]
    SpanNotSaturated { batches: usize, trace: Vec<usize> },

    #[error("span is incompatible with the moment model: {0}")]
    SpanMismatch(String),

    #[error("solver finished with status {status}: {detail}")]
    Solver { status: String, detail: String },

    #[error("malformed input: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
