use std::path::PathBuf;

use crate::volume::Shape4;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite voxel value at flat index {index}")]
    NonFinite { index: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("zero extent in stored shape")]
    ZeroExtent,
    #[error("line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("line {line}: unknown label {token:?}")]
    UnknownLabel { line: usize, token: String },
    #[error("line {line}: duplicate volume path {path}")]
    DuplicatePath { line: usize, path: PathBuf },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: Shape4, found: Shape4 },
    #[error("channel mismatch: expected {expected} input channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("class index {class} out of range for {count} classes")]
    ClassOutOfRange { class: usize, count: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("task {task} excludes every entry")]
    EmptyTask { task: String },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("phantom geometry out of bounds: {0}")]
    Geometry(String),
    #[error("AUC undefined: truth vector holds a single class")]
    SingleClassAuc,
    #[error("non-finite value produced at iteration {iter}")]
    NonFiniteIter { iter: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
