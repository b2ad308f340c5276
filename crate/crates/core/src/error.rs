use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("invalid splat: {0}")]
    InvalidSplat(String),

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("raster size mismatch: expected {expected:?}, got {got:?}")]
    SizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("empty point set")]
    EmptyPointSet,

    #[error("degenerate scene radius (all points coincide)")]
    DegenerateRadius,

    #[error("non-finite gradient at parameter {index}: {value}")]
    NonFiniteGradient { index: usize, value: f64 },

    #[error("parameter/gradient shape mismatch: {params} params, {grads} grads")]
    ShapeMismatch { params: usize, grads: usize },

    #[error("loss is not finite at perturbed parameter {index}")]
    NonFiniteLoss { index: usize },

    #[error("too few usable depth correspondences: {found} (need {required})")]
    TooFewCorrespondences { found: usize, required: usize },

    #[error("degenerate depth fit: {0}")]
    DegenerateFit(String),

    #[error("invalid body model: {0}")]
    InvalidBody(String),

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot position actor: {0}")]
    CannotPosition(String),

    #[error("tracking error: {0}")]
    Tracking(String),

    #[error("no matched actors")]
    NoMatchedActors,

    #[error("refinement error: {0}")]
    Refine(String),

    #[error("invalid scene spec: {0}")]
    InvalidSceneSpec(String),

    #[error("bundle error: {0}")]
    Bundle(String),

    #[error("unsupported bundle version {found} (expected {expected})")]
    BundleVersion { found: u32, expected: u32 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
