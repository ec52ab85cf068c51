//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by dataset construction, parsing, and serialization.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic: expected \"DVLP\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },

    #[error("dim mismatch: manifest dim {expected}, file dim {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("region count mismatch for {video_id}: manifest says {expected}, file has {found}")]
    RegionCountMismatch {
        video_id: String,
        expected: usize,
        found: usize,
    },

    #[error("no regions")]
    NoRegions,

    #[error("empty caption")]
    EmptyCaption,

    #[error("contrastive batch too small: got {0} pairs, need at least 2")]
    BatchTooSmall(usize),

    #[error(
        "invalid box ({x1}, {y1}, {x2}, {y2}) for frame {frame_w}x{frame_h}: {reason}"
    )]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        frame_w: f64,
        frame_h: f64,
        reason: String,
    },

    #[error("cannot sample {m} frames from {m_total} total")]
    BadFrameCount { m: usize, m_total: usize },

    #[error("invalid iou threshold {0}: must lie in (0, 1)")]
    BadIouThreshold(f64),

    #[error("unknown video id {0:?}")]
    UnknownVideo(String),

    #[error("dataset smaller than one contrastive batch: {0} videos")]
    DatasetTooSmall(usize),

    #[error("inconsistent planted parameters: {0}")]
    BadPlantedParams(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Errors raised by model construction, encoding, and training.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("missing parameter {0:?}")]
    MissingParameter(String),

    #[error("temporal table overflow: frame slot {slot} >= table size {max}")]
    TemporalOverflow { slot: usize, max: usize },

    #[error("all positions masked")]
    AllMasked,

    #[error("non-finite value in parameter {0:?}")]
    NonFiniteParameter(String),

    #[error("non-finite gradient for parameter {0:?}")]
    NonFiniteGradient(String),

    #[error("non-finite similarity entry at ({row}, {col})")]
    NonFiniteSimilarity { row: usize, col: usize },

    #[error("invalid config: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("checkpoint parse error: {0}")]
    Json(#[from] serde_json::Error),
}
