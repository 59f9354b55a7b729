use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("gimbal lock: |R[2][0]| = {0} is within 1e-6 of 1")]
    GimbalLock(f64),
    #[error("image coordinate ({u}, {v}) lies outside the image circle")]
    OutOfImageCircle { u: f64, v: f64 },
    #[error("vector norm {0} is not 1")]
    NotUnitVector(f64),
    #[error("transform has non-zero translation (norm {0}); rotation flow is rotation-only")]
    NonRotationalTransform(f64),
    #[error("resolution mismatch: {0} vs {1}")]
    ResolutionMismatch(usize, usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid projection table: {0}")]
    InvalidProjection(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("missing image {0}")]
    MissingImage(PathBuf),
    #[error("timestamps are not monotone at line {0}")]
    NonMonotoneTimestamps(usize),
    #[error("camera pose is outside the room")]
    CameraOutsideRoom,
    #[error("predictor failure: {0}")]
    PredictorFailure(String),
    #[error("cannot evaluate an empty set of trials")]
    EmptyEvaluation,
    #[error("image codec: {0}")]
    Image(#[from] ::image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
