//! Crate-wide error type.
//!
//! Errors are split into two classes so the CLI can map them to stable
//! exit codes: `Validation` problems (bad inputs, bad config, violated
//! preconditions) exit with 1, runtime failures (I/O mid-run, divergence)
//! exit with 2.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("slide '{slide_id}': image is {image_h}x{image_w} but mask is {mask_h}x{mask_w}")]
    DimensionMismatch {
        slide_id: String,
        image_h: usize,
        image_w: usize,
        mask_h: usize,
        mask_w: usize,
    },

    #[error("duplicate slide_id '{0}' in manifest")]
    DuplicateSlideId(String),

    #[error("missing prediction for slide '{0}'")]
    MissingPrediction(String),

    #[error("infeasible geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{0}")]
    Runtime(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    /// Exit code class: 1 for validation-type errors, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Manifest(_)
            | Error::DimensionMismatch { .. }
            | Error::DuplicateSlideId(_)
            | Error::MissingPrediction(_)
            | Error::InfeasibleGeometry(_)
            | Error::ShapeMismatch(_)
            | Error::InvalidInput(_)
            | Error::Config(_)
            | Error::Checkpoint(_) => 1,
            Error::Io { .. } | Error::Image { .. } | Error::Divergence(_) | Error::Runtime(_) => 2,
        }
    }
}
