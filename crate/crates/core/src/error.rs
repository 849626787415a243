use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {layer}")]
    Numerical { layer: String },

    #[error("checkpoint format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("unsupported method: {0}")]
    UnsupportedMethod(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("runs share no checkpoint steps")]
    EmptyIntersection,

    #[error("missing feature `{feature}` for checkpoint {checkpoint}")]
    MissingFeature { feature: String, checkpoint: String },

    #[error("degenerate feature column `{0}` (zero variance)")]
    DegenerateFeature(String),

    #[error("design matrix is singular even after ridge fallback")]
    SingularDesign,

    #[error("cross-validation needs at least two groups, found {0}")]
    InsufficientGroups(usize),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("missing inputs:\n  - {}", .0.join("\n  - "))]
    MissingInputs(Vec<String>),

    #[error("manifest verification failed:\n  - {}", .0.join("\n  - "))]
    Manifest(Vec<String>),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidInput(_) => 2,
            Error::Numerical { .. } => 3,
            Error::MissingInputs(_) => 4,
            _ => 1,
        }
    }
}
