use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::Label;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset root {0} does not exist")]
    MissingRoot(PathBuf),

    #[error("no usable images found under {0}")]
    EmptyDataset(PathBuf),

    #[error("class {label} has {count} sample(s); at least 2 are needed to stratify")]
    TooFewSamples { label: Label, count: usize },

    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("invalid image data: {0}")]
    InvalidImage(String),

    #[error("pretrained weights for backbone {backbone} not found at {path}")]
    MissingPretrainedWeights { backbone: String, path: PathBuf },

    #[error("weights file {path}: {reason}")]
    Weights { path: PathBuf, reason: String },

    #[error("non-finite loss at epoch {epoch}, step {step} (learning rate {lr:e})")]
    NonFiniteLoss { epoch: usize, step: usize, lr: f32 },

    #[error("label length mismatch: {predicted} predicted vs {actual} actual")]
    LengthMismatch { predicted: usize, actual: usize },

    #[error("checkpoint for run {run} missing at {path}")]
    MissingCheckpoint { run: String, path: PathBuf },

    #[error("no training history available for {0}")]
    EmptyHistory(String),

    #[error("plotting failed: {0}")]
    Plot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
