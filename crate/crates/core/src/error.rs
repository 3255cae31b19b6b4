// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module.

use std::path::PathBuf;

use crate::component::ComponentId;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes of the toolkit.
///
/// Variants are grouped so the CLI can map them onto its exit codes:
/// configuration and IO problems, dataset validation failures, and
/// numeric degeneracies.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("weight archive: {0}")]
    Archive(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("token id {id} out of range (vocab size {vocab_size})")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("intervention at {site}: {reason}")]
    Intervention { site: String, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}:{line}: {reason}")]
    DatasetLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("pair is not token-aligned: clean has {clean} tokens, corrupt has {corrupt}")]
    Misaligned { clean: usize, corrupt: usize },

    #[error("degenerate target direction (norm {norm:e})")]
    DegenerateTarget { norm: f32 },

    #[error("degenerate steering basis: {0}")]
    DegenerateBasis(String),

    #[error("zero-norm steering direction")]
    ZeroDirection,

    #[error("component {0} is not valid for this model")]
    InvalidComponent(ComponentId),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad class of the failure, used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Dataset(_)
            | Error::DatasetLine { .. }
            | Error::Misaligned { .. }
            | Error::TokenOutOfRange { .. } => ErrorKind::Data,
            Error::DegenerateTarget { .. }
            | Error::DegenerateBasis(_)
            | Error::ZeroDirection => ErrorKind::Numeric,
            _ => ErrorKind::Usage,
        }
    }
}

/// Coarse error classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}
