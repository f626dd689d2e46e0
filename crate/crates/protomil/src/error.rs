use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("manifest schema violation: {0}")]
    Schema(String),

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("AUC undefined: scores contain a single class")]
    AucUndefined,

    #[error("numerical abort: non-finite loss at epoch {epoch}, bag {bag_id}")]
    NumericalAbort { epoch: usize, bag_id: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
