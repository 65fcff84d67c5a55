use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not hold {len} elements")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape {0:?} has a zero-sized axis")]
    ZeroDim(Vec<usize>),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("empty tensor list")]
    Empty,
}

/// Errors raised while building or evaluating an expression graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis { op: &'static str, axis: usize, rank: usize },
    #[error("duplicate leaf name `{0}`")]
    DuplicateLeaf(String),
    #[error("leaf `{0}` is not bound")]
    Unbound(String),
    #[error("leaf `{name}` expects shape {expected:?}, bound tensor has {found:?}")]
    BindingShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("gradient requested for non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node id {0} does not belong to this graph")]
    BadNode(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (expected ROCL)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint header is malformed: {0}")]
    Header(String),
    #[error("payload checksum mismatch")]
    Checksum,
    #[error("dtype {found} does not match build precision {expected}")]
    Dtype { found: String, expected: &'static str },
    #[error("tensor table does not match the model configuration: {0}")]
    Table(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: size {size} is not a multiple of the {record}-byte record (truncated record at byte {offset})")]
    Truncated { path: PathBuf, size: usize, record: usize, offset: usize },
    #[error("{path}: label byte {label} at offset {offset} is not below {classes}")]
    Label { path: PathBuf, label: u8, classes: usize, offset: usize },
    #[error("{path}: empty file")]
    Empty { path: PathBuf },
    #[error("dataset invariant violated: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Crate-level error used by model, attack, training and evaluation code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("frozen parameter `{0}` was modified")]
    FrozenMutated(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
