use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-positive disparity {disparity} px (target at or beyond infinity, or left/right swapped)")]
    NonPositiveDisparity { disparity: f64 },

    #[error("point is behind the camera (depth {depth} m)")]
    BehindCamera { depth: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scene is infeasible: {rejected} of {attempts} candidate placements rejected")]
    InfeasibleScene { attempts: usize, rejected: usize },

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty input")]
    EmptyInput,

    #[error("length mismatch: {0} predictions vs {1} ground truths")]
    LengthMismatch(usize, usize),

    #[error("stage {stage} has no hard samples")]
    EmptyHardSet { stage: usize },

    #[error("shape mismatch for `{name}`: expected {expected} values, found {found}")]
    Shape {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { expected: u32, found: u32 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
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
