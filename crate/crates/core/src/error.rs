use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("input size {height}x{width} is not divisible by 8; pad or resize the image first")]
    NotDivisible { height: usize, width: usize },

    #[error("scene {scene_id}: head point #{index} ({x}, {y}) lies outside the {width}x{height} image")]
    PointOutOfBounds {
        scene_id: String,
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("scene {scene_id}: failed to load image {path}: {reason}")]
    ImageLoad {
        scene_id: String,
        path: PathBuf,
        reason: String,
    },

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("pretrained weights: layer {layer}: {reason}")]
    Pretrained { layer: String, reason: String },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("checkpoint format mismatch in {path}: expected format tag {expected}, found {found}")]
    FormatMismatch {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },

    #[error("checkpoint holds variant {found}, expected {expected}")]
    VariantMismatch { expected: String, found: String },

    #[error("model variant {0} has no attention state")]
    NoAttention(String),

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (scenes: {scenes})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss: f64,
        scenes: String,
    },

    #[error("empty training set")]
    EmptyTrainingSet,

    #[error("all-zero ground truth density; skip this image for PSNR/SSIM")]
    ZeroGroundTruth,

    #[error("i/o error at {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encode {path}: {reason}")]
    ImageWrite { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
