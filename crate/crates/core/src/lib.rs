//! Cross-lingual post-training (XPT) of a small masked-language-model
//! encoder, end to end on CPU: tensors with reverse-mode autodiff, a BPE
//! tokenizer, the encoder model with optional implicit translation layers,
//! the two-phase post-training schedule, a synthetic bilingual corpus
//! generator, fine-tuning and probing, and bit-exact checkpointing.

pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod util;

pub use error::{Error, Result};
