use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("precondition violated in {op}: {detail}")]
    Precondition { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error for `{id}`: {detail}")]
    Sample { id: String, detail: String },

    #[error("dataset error at {}: {detail}", path.display())]
    Dataset { path: PathBuf, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {term} = {value}")]
    NonFiniteLoss { step: usize, term: &'static str, value: f64 },

    #[error("non-finite gradient at step {step} for `{param}`")]
    NonFiniteGradient { step: usize, param: String },

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numeric failures during training, as opposed to bad input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. })
    }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}

pub(crate) fn precondition(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Precondition { op, detail: detail.into() }
}
