use std::path::PathBuf;

/// Broad failure classes, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("class directory `{0}` contains no images")]
    EmptyClass(String),

    #[error("cannot decode image {path}: {reason}")]
    UndecodableImage { path: PathBuf, reason: String },

    #[error("crop rectangle (x={x}, y={y}, h={h}, w={w}) falls outside the image")]
    CropOutOfBounds { x: f64, y: f64, h: f64, w: f64 },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("attention channel {channel} of sample {sample} sums to zero")]
    DegenerateAttention { sample: usize, channel: usize },

    #[error("row {row} has a near-zero norm before normalization")]
    ZeroVector { row: usize },

    #[error("no anchor has a non-empty positive set")]
    NoValidAnchor,

    #[error("projection row {row} left the unit hypersphere (norm {norm})")]
    HypersphereViolation { row: usize, norm: f64 },

    #[error("non-finite loss on {skipped} of {steps} steps")]
    NonFiniteLoss { skipped: usize, steps: usize },

    #[error("frozen parameters changed during head training: {0}")]
    FrozenViolation(String),

    #[error("parameters changed between the global and zoom forwards of step {0}")]
    WeightSharing(u64),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("labels contain a single class; AUC is undefined")]
    DegenerateLabels,

    #[error("classes {0} and {1} have coincident centroids")]
    CoincidentCentroids(usize, usize),

    #[error("sample {0} has no lesion mask")]
    NoMask(usize),

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            InvalidSpec(_) | Config(_) => ErrorCategory::Config,
            EmptyClass(_)
            | UndecodableImage { .. }
            | CropOutOfBounds { .. }
            | LabelOutOfRange { .. }
            | DegenerateLabels
            | NoMask(_)
            | MissingCheckpoint(_)
            | Checkpoint(_)
            | Io { .. }
            | Image(_)
            | Json(_) => ErrorCategory::Data,
            ShapeMismatch(_)
            | DegenerateAttention { .. }
            | ZeroVector { .. }
            | NoValidAnchor
            | HypersphereViolation { .. }
            | NonFiniteLoss { .. }
            | FrozenViolation(_)
            | WeightSharing(_)
            | CoincidentCentroids(..)
            | Candle(_) => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
