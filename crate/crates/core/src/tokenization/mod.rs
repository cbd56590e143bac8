//! Byte-level BPE, the unified vocabulary and the box codec.

pub mod boxes;
pub mod bpe;
pub mod vocab;

pub use boxes::{box_to_tokens, tokens_to_box, BBox};
pub use bpe::{train_bpe, BpeModel, BOS, EOS, MASK, PAD, SEP};
pub use vocab::{assemble, TokenKind, UnifiedVocabulary, VocabSizes};
