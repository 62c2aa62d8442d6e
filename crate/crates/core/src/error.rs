use std::path::PathBuf;

/// Error type shared by every module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: file length {len} is not a multiple of the {stride}-byte record size")]
    TruncatedRecord {
        path: PathBuf,
        len: u64,
        stride: u64,
    },

    #[error("non-finite value encountered in {context}")]
    NonFiniteValue { context: String },

    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("pose rotation block is not orthonormal (deviation {deviation:.2e} exceeds {tolerance:.0e})")]
    NonOrthonormalRotation { deviation: f64, tolerance: f64 },

    #[error("pose is not a rigid transform: {msg}")]
    NonRigidPose { msg: String },

    #[error("label value {value} does not fit the 16-bit on-disk field")]
    LabelOutOfRange { value: u32 },

    #[error("length mismatch: {what} has {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("count mismatch: {what} ({got} vs {expected})")]
    CountMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("no prediction for voxel {voxel} (have {have})")]
    MissingVoxel { voxel: usize, have: usize },

    #[error("grid coordinate {coord} outside the {bits}-bit per-axis key range")]
    CoordinateOutOfRange { coord: i64, bits: u32 },

    #[error("pattern list is empty")]
    EmptyPatternList,

    #[error("shape mismatch in {op}: {msg}")]
    ShapeMismatch { op: &'static str, msg: String },

    #[error("loss value is not connected to any differentiable leaf")]
    DisconnectedLoss,

    #[error("step size must be positive, got {value}")]
    NonPositiveDelta { value: f64 },

    #[error("probability row {row} sums to {sum}, not 1")]
    RowNotNormalized { row: usize, sum: f64 },

    #[error("unknown scene suite: {0}")]
    UnknownSuite(String),

    #[error("config error in {path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("checkpoint was written for a different model config (digest {stored:#018x}, expected {expected:#018x})")]
    ConfigDigestMismatch { stored: u64, expected: u64 },

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
