use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("manifest row {row}: {reason}")]
    ManifestRow { row: usize, reason: String },
    #[error("missing mask file {0}")]
    MissingMask(PathBuf),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty mask")]
    EmptyMask,
    #[error("no tongue detected (confidence {confidence:.3} below floor {floor:.3})")]
    NoDetection { confidence: f64, floor: f64 },
    #[error("index {index} out of range for {len} patches")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid value for {field}: {reason}")]
    InvalidValue { field: String, reason: String },
    #[error("invalid label {0}, expected 0 or 1")]
    InvalidLabel(u8),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("patch mask selects no instance")]
    EmptySelection,
    #[error("empty input: {0}")]
    Empty(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("argmax tie between instances {0} and {1}")]
    ArgmaxTie(usize, usize),
    #[error("adapter failure: {0}")]
    Adapter(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidValue {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
