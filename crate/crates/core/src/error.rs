use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid configuration keys: {}", .0.join(", "))]
    Schema(Vec<String>),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("failed to load `{}`: {reason}", path.display())]
    Load { path: PathBuf, reason: String },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("network sampler: {0}")]
    Sampler(String),

    #[error("augmentation parameters out of range: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("coreset selection: {0}")]
    Selection(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("non-finite matching loss at iteration {iteration} (per-class losses: {class_losses:?})")]
    NonFiniteLoss {
        iteration: usize,
        class_losses: Vec<f64>,
    },

    #[error("rank correlation: {0}")]
    Correlation(String),

    #[error("image export: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
