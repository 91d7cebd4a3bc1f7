use std::path::PathBuf;

use finpipe_core::CoreError;
use finpipe_embedder::EmbedError;
use finpipe_synth::SynthError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, AppError>;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("no embedder model is loaded")]
    ModelUnavailable,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Embed(#[from] EmbedError),

    #[error(transparent)]
    Synth(#[from] SynthError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AppError {
        let path = path.into();
        move |source| AppError::Io { path, source }
    }

    pub fn is_config(&self) -> bool {
        match self {
            AppError::Config(_) => true,
            AppError::Core(CoreError::InvalidConfig(_)) => true,
            AppError::Embed(EmbedError::Config(_)) => true,
            AppError::Embed(EmbedError::Core(CoreError::InvalidConfig(_))) => true,
            AppError::Synth(SynthError::Config(_)) => true,
            AppError::Synth(SynthError::Core(CoreError::InvalidConfig(_))) => true,
            _ => false,
        }
    }

    /// Process exit code: 2 for configuration errors, 3 for data errors.
    pub fn exit_code(&self) -> i32 {
        if self.is_config() {
            2
        } else {
            3
        }
    }

    /// Machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            AppError::Core(CoreError::NotFound { .. }) => "not_found",
            AppError::Core(CoreError::Conflict(_)) => "conflict",
            AppError::ModelUnavailable => "model_unavailable",
            e if e.is_config() => "invalid_config",
            AppError::Core(CoreError::Schema { .. }) => "schema_violation",
            AppError::Core(
                CoreError::DimensionMismatch { .. }
                | CoreError::EmbeddingDimension { .. }
                | CoreError::EmptyMask
                | CoreError::EmptyInput(_)
                | CoreError::InvalidRle(_)
                | CoreError::BBoxMismatch { .. }
                | CoreError::InvalidState(_),
            ) => "invalid_input",
            AppError::Data(_) | AppError::Image(_) | AppError::Json(_) => "invalid_input",
            _ => "internal",
        }
    }
}
