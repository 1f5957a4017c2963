use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("training diverged at iteration {iteration} on view {view}: {what}")]
    NonFiniteLoss {
        iteration: usize,
        view: usize,
        what: String,
    },

    #[error("every Gaussian was pruned; the scene collapsed (iteration {iteration})")]
    SceneCollapsed { iteration: usize },

    #[error("unsupported camera model `{0}` (only PINHOLE and SIMPLE_PINHOLE are handled)")]
    UnsupportedCameraModel(String),

    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("scene schema error at {json_path}: {msg}")]
    Schema { json_path: String, msg: String },

    #[error("{msg}: {path}")]
    MissingFile { path: PathBuf, msg: String },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;
