use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("missing subject {0}")]
    MissingSubject(u32),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Divergence {
        epoch: usize,
        step: u64,
        message: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("checkpoint incomplete: {0}")]
    IncompleteCheckpoint(String),

    #[error("checkpoint incompatible with model spec: {0}")]
    Incompatible(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used in CLI error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Schema(_) => "schema",
            Error::Validation(_) => "validation",
            Error::Range(_) => "range",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateData(_) => "degenerate_data",
            Error::Precondition(_) => "precondition",
            Error::MissingSubject(_) => "missing_subject",
            Error::Shape(_) => "shape",
            Error::Input(_) => "input",
            Error::EmptyBatch => "empty_batch",
            Error::Config(_) => "config",
            Error::Numerical(_) => "numerical",
            Error::Divergence { .. } => "divergence",
            Error::Data(_) => "data",
            Error::Corruption(_) => "corruption",
            Error::IncompleteCheckpoint(_) => "incomplete_checkpoint",
            Error::Incompatible(_) => "incompatible",
            Error::Json(_) => "json",
        }
    }
}
