use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ReidError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ReidError {
    #[error("malformed filename '{0}'")]
    MalformedFilename(String),

    #[error("invalid camera id {camera} in '{name}' (cameras are numbered from 1)")]
    InvalidCamera { name: String, camera: i64 },

    #[error("missing directory: {}", .0.display())]
    MissingDirectory(PathBuf),

    #[error("split '{0}' has no images")]
    EmptySplit(&'static str),

    #[error("need {needed} identities with images, only {available} available")]
    InsufficientIdentities { needed: usize, available: usize },

    #[error("identity {person_id} has {available} images, batch needs {needed} and replacement is disabled")]
    InsufficientInstances {
        person_id: i32,
        available: usize,
        needed: usize,
    },

    #[error("invalid batch shape: {0}")]
    InvalidBatchShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown head {index} (model has {count})")]
    UnknownHead { index: usize, count: usize },

    #[error("channel count {0} is odd; head blocks halve the channels")]
    OddChannels(usize),

    #[error("head {0} has not been trained")]
    UntrainedHead(usize),

    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("pair mask has {0} pairs, the covariance term needs at least 2")]
    MaskTooSmall(usize),

    #[error("feature tap {0} is not available")]
    TapUnavailable(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown optimizer kind '{0}'")]
    UnknownKind(String),

    #[error("optimizer needs a non-empty parameter set")]
    EmptyParameterSet,

    #[error("phase plan does not match the model: {0}")]
    PlanMismatch(String),

    #[error("non-finite loss at iteration {iter} (ce={ce}, cov={cov}); state dumped to {}", .dump.display())]
    NonFiniteLoss {
        iter: usize,
        ce: f64,
        cov: f64,
        dump: PathBuf,
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("no query has a valid match in the gallery")]
    NoValidQueries,

    /// Wrong magic, or a file cut short before its declared end.
    #[error("not a valid {expected} file: {reason}")]
    BadMagic { expected: &'static str, reason: String },

    #[error("truncated or malformed data: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("native kernel failed: {0}")]
    Kernel(String),

    #[error("image decode failed for {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ReidError {
    /// Process exit code for command-line front ends.
    ///
    /// 1 runtime failure, 2 input/validation error, 3 dimension/format error,
    /// 4 empty-result protocol error.
    pub fn exit_code(&self) -> i32 {
        use ReidError::*;
        match self {
            MalformedFilename(_)
            | InvalidCamera { .. }
            | MissingDirectory(_)
            | EmptySplit(_)
            | InsufficientIdentities { .. }
            | InsufficientInstances { .. }
            | InvalidBatchShape(_)
            | UnknownHead { .. }
            | UnknownKind(_)
            | EmptyParameterSet
            | PlanMismatch(_)
            | LabelOutOfRange { .. }
            | MaskTooSmall(_)
            | TapUnavailable(_)
            | UntrainedHead(_)
            | BadMagic { .. }
            | Config(_) => 2,
            ShapeMismatch(_) | OddChannels(_) | DimMismatch(_) | Format(_) => 3,
            NoValidQueries => 4,
            _ => 1,
        }
    }
}
