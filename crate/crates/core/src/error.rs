use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseError {
    #[error("transform contains non-finite values")]
    NonFinite,
    #[error("rotation is not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("rotation has non-positive determinant {0}")]
    ImproperRotation(f64),
    #[error("expected 23 joints, got {0}")]
    JointCount(usize),
    #[error("joint `{0}` appears more than once")]
    DuplicateJoint(&'static str),
    #[error("unknown joint name `{0}`")]
    UnknownJoint(String),
    #[error("head/pelvis index does not match joint names")]
    IndexMismatch,
    #[error("pose sequence needs at least 2 frames, got {0}")]
    SequenceTooShort(usize),
    #[error("frame interval must be positive and uniform, got {0}")]
    BadFrameInterval(f64),
    #[error("control tensor has {got} values, expected {expected}")]
    ControlShape { expected: usize, got: usize },
    #[error("pose file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("parameter name `{0}` already registered")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("{0}")]
    Data(String),
    #[error("non-finite training loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
