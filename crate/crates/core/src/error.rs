use thiserror::Error;

use crate::grid::VoxelIndex;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid spec: {0}")]
    InvalidGridSpec(String),

    #[error("voxel index {index:?} outside grid dims {dims:?}")]
    IndexOutOfRange { index: VoxelIndex, dims: [usize; 3] },

    #[error("array shape mismatch: expected {expected} elements, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("grid specs differ between inputs")]
    SpecMismatch,

    #[error("ego position {0:?} lies outside the grid")]
    EgoOutsideGrid([f64; 3]),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("could not place object {index} without overlap after {attempts} attempts")]
    Placement { index: usize, attempts: usize },

    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("cost matrix has {rows} rows but only {cols} columns")]
    TooFewColumns { rows: usize, cols: usize },

    #[error("{predictions} predictions cannot cover {targets} ground-truth objects")]
    TooFewPredictions { predictions: usize, targets: usize },

    #[error("{offsets} offsets cannot cover an object with {voxels} voxels")]
    TooFewOffsets { offsets: usize, voxels: usize },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid panoptic grid: {0}")]
    InvalidPanoptic(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("artifact {artifact} checksum {got} differs from recorded {expected}")]
    ChecksumMismatch {
        artifact: String,
        expected: String,
        got: String,
    },

    #[error("{path}: {source}")]
    Input {
        path: std::path::PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error raised while reading `path`.
    pub fn input(path: impl Into<std::path::PathBuf>, source: Error) -> Self {
        Error::Input {
            path: path.into(),
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
