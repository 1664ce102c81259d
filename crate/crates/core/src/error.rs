use std::path::PathBuf;

/// Errors produced anywhere in the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("undefined SNR: {0}")]
    UndefinedSnr(String),

    #[error("non-finite values produced by {module}")]
    NonFinite { module: &'static str },

    #[error("non-finite loss at step {step} (sample seed {seed})")]
    Divergence { step: usize, seed: u64 },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Short machine-readable tag, used by the command-line error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Input(_) => "input",
            Error::UndefinedSnr(_) => "undefined_snr",
            Error::NonFinite { .. } => "non_finite",
            Error::Divergence { .. } => "divergence",
            Error::Format { .. } => "format",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
