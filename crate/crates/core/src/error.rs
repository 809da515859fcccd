use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report. [`CompassError::kind`] gives a
/// stable machine-readable tag used by the CLI and the HTTP service.
#[derive(Debug, Error)]
pub enum CompassError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("projection error: {0}")]
    Projection(String),
    #[error("prompt error: {0}")]
    Prompt(String),
    #[error("binding error: {0}")]
    Binding(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("render error (job {job_id}): {message}")]
    Render { job_id: String, message: String },
    #[error("augmentation error: {0}")]
    Augmentation(String),
    #[error("validation error: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("input error: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("prediction error: {0}")]
    Prediction(String),
    #[error("client error: {0}")]
    Client(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("weights error: {0}")]
    Weights(#[from] compass_autograd::ParamError),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl CompassError {
    pub fn kind(&self) -> &'static str {
        match self {
            CompassError::Domain(_) => "domain",
            CompassError::Config(_) => "config",
            CompassError::Placement(_) => "placement",
            CompassError::Projection(_) => "projection",
            CompassError::Prompt(_) => "prompt",
            CompassError::Binding(_) => "binding",
            CompassError::Mask(_) => "mask",
            CompassError::Numeric(_) => "numeric",
            CompassError::Capability(_) => "capability",
            CompassError::Render { .. } => "render",
            CompassError::Augmentation(_) => "augmentation",
            CompassError::Validation(_) => "validation",
            CompassError::Input(_) => "input",
            CompassError::Data(_) => "data",
            CompassError::Prediction(_) => "prediction",
            CompassError::Client(_) => "client",
            CompassError::Io { .. } => "io",
            CompassError::Serde(_) => "serialization",
            CompassError::Weights(_) => "weights",
            CompassError::Image(_) => "image",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CompassError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = CompassError> = std::result::Result<T, E>;
