//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("weights archive {path}: {message}")]
    Archive { path: PathBuf, message: String },

    #[error("missing tensor `{0}` in weights archive")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("scoring: {0}")]
    Scoring(String),

    #[error("need at least one positive and one negative sample")]
    SingleClass,

    #[error("all scores are identical; ranking metrics are undefined")]
    DegenerateScores,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
