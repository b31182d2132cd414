use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: invalid field `{field}`: {message}")]
    InvalidField {
        line: usize,
        field: String,
        message: String,
    },

    #[error("line {line}: duplicate image_id `{image_id}`")]
    DuplicateId { line: usize, image_id: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("image `{image_id}` has no output for model `{model_id}`")]
    MissingModel { image_id: String, model_id: String },

    #[error("feature profile mismatch: expected {expected:?}, got {actual:?}")]
    ProfileMismatch { expected: Vec<String>, actual: Vec<String> },

    #[error("feature extraction failed for image `{image_id}`: {message}")]
    FeatureExtraction { image_id: String, message: String },

    #[error("image decode error: {0}")]
    Decode(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("model file error: {0}")]
    ModelFile(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by invalid user input or configuration rather
    /// than by the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::InvalidField { .. }
                | Error::DuplicateId { .. }
                | Error::Config(_)
                | Error::InvalidInput(_)
                | Error::MissingModel { .. }
                | Error::ProfileMismatch { .. }
                | Error::ModelFile(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
