//! Crate-wide error type and exit-code classification.

use thiserror::Error;

/// Errors produced anywhere in the training/evaluation stack.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement; carries both offending shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Parse failure in a text file (config, vocab, merges); 1-based line.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A non-finite value surfaced where only finite values are legal.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Loss requested over zero contributing positions.
    #[error("empty loss: every position is ignored")]
    EmptyLoss,

    /// Model or pipeline used in a state its contract forbids.
    #[error("invalid state: {0}")]
    State(String),

    /// Checkpoint integrity failure (checksum, truncation, bad magic).
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    /// Checkpoint format version this build does not understand.
    #[error("unsupported checkpoint version {0}")]
    Version(u32),

    /// Vocabulary bound to the model differs from the one supplied.
    #[error("vocabulary mismatch: model has {model_hash}, supplied {supplied_hash}")]
    VocabMismatch {
        model_hash: String,
        supplied_hash: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    /// The CLI maps validation errors to exit 1 and everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::Config(_)
                | Error::Parse { .. }
                | Error::State(_)
                | Error::VocabMismatch { .. }
                | Error::Version(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
