//! Shared error type for the core crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("token `{0}` not present in lexicon")]
    UnknownToken(String),

    #[error("phoneme `{0}` not present in inventory")]
    UnknownPhoneme(String),

    #[error("token `{0}` not present in vocabulary")]
    UnknownVocabToken(String),

    #[error("invalid span {start}..{end} for transcript of length {len}")]
    InvalidSpan {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("entity spans overlap at token {0}")]
    OverlappingSpans(usize),

    #[error("reference of length {ref_len} cannot be aligned to {frames} frames")]
    CtcInfeasible { ref_len: usize, frames: usize },

    #[error("{side} argument has norm below 1e-12")]
    ZeroNorm { side: &'static str },

    #[error("backward already run on this tape")]
    BackwardTwice,

    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),

    #[error("{0}")]
    Contract(String),

    #[error("malformed file {path}: {msg}")]
    Malformed { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn malformed(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
