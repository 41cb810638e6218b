use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image `{image_id}` has shape {actual:?}, model expects {expected:?}")]
    ShapeMismatch {
        image_id: String,
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("class index {index} out of range for {num_classes} classes")]
    ClassOutOfRange { index: usize, num_classes: usize },

    #[error("feature index {index} out of range for {feature_count} features")]
    FeatureOutOfRange { index: usize, feature_count: usize },

    #[error("model `{0}` does not provide input gradients")]
    GradientsUnavailable(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty subset: {0}")]
    EmptySubset(String),

    #[error("class {class} has {available} eligible images, {required} required")]
    NotEnoughImages {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("conflicting cache write for image `{image_id}` (model `{model_id}`)")]
    ConflictingWrite { model_id: String, image_id: String },

    #[error("image `{0}` not found")]
    UnknownImage(String),

    #[error("mask for feature {feature} of image `{image_id}` not found")]
    UnknownMask { feature: usize, image_id: String },

    #[error("unknown hit `{0}`")]
    UnknownHit(String),

    #[error("hit `{0}` is closed: quorum already reached")]
    HitClosed(String),

    #[error("invalid response: {0}")]
    InvalidResponse(String),

    #[error(
        "no sigma in grid reaches the target mean l2 {target:.6}; best was {best:.6} at sigma {best_sigma}"
    )]
    Unmatched {
        target: f64,
        best: f64,
        best_sigma: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place glyph and patch without overlap after {0} attempts")]
    PlacementFailed(usize),

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("checksum mismatch for {path}")]
    ChecksumMismatch { path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
