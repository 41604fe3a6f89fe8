use std::path::PathBuf;

use thiserror::Error;

use crate::tokenizer::TokenKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind:?} value {value} out of range")]
    Range { kind: TokenKind, value: i64 },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("grammar violation at token {index}: {reason}")]
    Grammar { index: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at word {index}: {reason}")]
    Parse { index: usize, reason: String },

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Midi { path: PathBuf, reason: String },

    #[error("{path}: neither a MELODY nor a BRIDGE track is present")]
    MissingTrack { path: PathBuf },

    #[error("structure index {index} exceeds the {available} available contexts")]
    Index { index: usize, available: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("invalid distribution: {0}")]
    Distribution(String),

    #[error("empty segment: {0}")]
    EmptySegment(&'static str),

    #[error("alignment mismatch: {0} cases vs {1} outputs")]
    Alignment(usize, usize),

    #[error("non-finite loss at step {step} (batch {batch})")]
    NonFinite { step: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
