use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("empty input")]
    EmptyInput,

    #[error("noise std must be positive, got {0}")]
    NonPositiveNoise(f64),

    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("sigma_init must be positive and finite, got {0}")]
    InvalidSigmaInit(f64),

    #[error("operation not supported for family {family}: {reason}")]
    FamilyMismatch { family: String, reason: String },

    #[error("moment state shape {expected} does not match gradient shape {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("non-finite loss at iteration {iteration}: kl={kl}, expected_nll={expected_nll}")]
    NonFiniteLoss {
        iteration: usize,
        kl: f64,
        expected_nll: f64,
    },

    #[error("unit {unit} out of range for {hidden} hidden units")]
    UnitOutOfRange { unit: usize, hidden: usize },

    #[error("parse error at row {row}, column {col}: {message}")]
    ParseError {
        row: usize,
        col: usize,
        message: String,
    },

    #[error("target column {column} not present ({columns} columns)")]
    MissingTarget { column: i64, columns: usize },

    #[error("every grid point diverged")]
    AllRunsDiverged,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable kind tag used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::EmptyInput => "EmptyInput",
            Error::NonPositiveNoise(_) => "NonPositiveNoise",
            Error::NonPositiveScale(_) => "NonPositiveScale",
            Error::InvalidSigmaInit(_) => "InvalidSigmaInit",
            Error::FamilyMismatch { .. } => "FamilyMismatch",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::UnitOutOfRange { .. } => "UnitOutOfRange",
            Error::ParseError { .. } => "ParseError",
            Error::MissingTarget { .. } => "MissingTarget",
            Error::AllRunsDiverged => "AllRunsDiverged",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Io { .. } => "Io",
            Error::Json(_) => "Json",
        }
    }
}
