//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("negative intensity {value} at flat index {index}")]
    NegativeIntensity { index: usize, value: f64 },

    #[error("non-finite intensity at flat index {index}")]
    NonFiniteIntensity { index: usize },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("non-finite value produced at iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("sweep failed at k={k}: {source}")]
    SweepFailure { k: usize, source: Box<Error> },

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("empty input")]
    EmptyInput,

    #[error("image needs at least two pixels")]
    TooFewPixels,

    #[error("image too small: need at least 3x3, got {rows}x{cols}")]
    TooSmall { rows: usize, cols: usize },

    #[error("no knee found: loss curve still steep at k_max")]
    KneeNotFound,

    #[error("too few points for knee detection: need at least 3, got {0}")]
    TooFewPoints(usize),

    #[error("no candidates to choose from")]
    EmptyCandidates,

    #[error("weight ratio needs at least two clusters, got k={0}")]
    NeedTwoClusters(usize),

    #[error("thresholds must be strictly increasing within (0, 1]")]
    BadThresholds,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("missing upstream artifact: {0}")]
    MissingUpstream(String),

    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
