use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor operations, data loading and model plumbing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensor shapes that must agree do not.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single shape is invalid for the requested operation.
    #[error("invalid shape in {op}: {shape:?} ({detail})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },

    /// Data length does not match the product of the shape.
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    /// An operation that requires non-empty input received an empty one.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// A token id is outside the vocabulary.
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    /// Undefined statistic (e.g. rank correlation of a constant sequence).
    #[error("undefined: {0}")]
    Undefined(String),

    /// Two aligned collections have different lengths.
    #[error("misaligned inputs: {what} ({lhs} vs {rhs})")]
    Misaligned {
        what: &'static str,
        lhs: usize,
        rhs: usize,
    },

    /// A binary file did not start with the expected magic bytes.
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    /// A manifest or config file failed to parse.
    #[error("parse error in {path} at line {line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    /// A file referenced by a manifest is missing or unreadable.
    #[error("cannot read {path}: {source}")]
    FileRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Generic I/O failure while writing.
    #[error("cannot write {path}: {source}")]
    FileWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Checkpoint contents do not match the expected model layout.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Corpus and vocabulary disagree.
    #[error("corpus/vocabulary mismatch: {0}")]
    CorpusMismatch(String),

    /// Unknown model variant name.
    #[error("unknown variant: {0}")]
    UnknownVariant(String),

    /// A configuration value is out of range or inconsistent.
    #[error("bad configuration: {0}")]
    Config(String),
}
