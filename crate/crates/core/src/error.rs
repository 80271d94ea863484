use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Configuration-class errors map to exit code 2 in the CLI, everything
    /// else to 3.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::Parameter(_) | Error::Usage(_)
        )
    }
}
