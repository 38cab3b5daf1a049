use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("checksum mismatch in {file}")]
    Checksum { file: PathBuf },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("validation failed for `{field}`: {detail}")]
    Validation { field: String, detail: String },

    #[error("invalid configuration `{field}`: {detail}")]
    InvalidConfig { field: String, detail: String },

    #[error("hip landmark unavailable in {id}")]
    LandmarkUnavailable { id: String },

    #[error("record {id} is not fully annotated")]
    NotFullyAnnotated { id: String },

    #[error("record {id} has no uncertainty map")]
    MissingUncertainty { id: String },

    #[error("all paired differences are zero")]
    Degenerate,

    #[error("too few non-zero differences: {0} (need at least 6)")]
    TooFewPairs(usize),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn validation(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by bad user input rather than the environment.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig { .. } | Error::Validation { .. } | Error::Json { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
