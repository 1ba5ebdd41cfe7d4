use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is below {threshold:e}")]
    ZeroVector { threshold: f64 },
    #[error("cosine {cosine} between feature and reconstruction is below the prolonging floor {floor}")]
    DegenerateAngle { cosine: f64, floor: f64 },
    #[error("feature dimension {dim} is not divisible into {splits} splits")]
    IndivisibleSplit { dim: usize, splits: usize },
    #[error("{requested} neighbours requested but only {available} prototypes are candidates")]
    InsufficientPrototypes { requested: usize, available: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {0} is not a known class")]
    UnknownLabel(usize),
    #[error("dataset is empty or has fewer than two classes")]
    EmptyDataset,
    #[error("non-finite {term} loss at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        step: usize,
    },
    #[error("checkpoint format version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint archive: {0}")]
    CorruptArchive(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("class {0} has no support samples")]
    EmptyClass(usize),
    #[error("split file not found: {}", .0.display())]
    MissingSplitFile(PathBuf),
    #[error("class `{0}` is assigned to more than one split")]
    OverlappingSplits(String),
    #[error("sample file not found: {}", .0.display())]
    MissingSample(PathBuf),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("image decode failed for {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("i/o failure")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}
