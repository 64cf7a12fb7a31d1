use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("all particle weights are zero (filter divergence)")]
    AllZeroWeights,
    #[error("no transition model for component {0}")]
    MissingModel(usize),
    #[error("cluster for component {0} received no particles")]
    EmptyComponent(usize),
    #[error("covariance is singular even after jitter")]
    SingularCovariance,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("sequence of length {len} is not longer than window {window}")]
    WindowTooLong { len: usize, window: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("schema version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("divergence alert raised at step {step}")]
    Divergence { step: usize },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
