//! Unified multimodal sequence-to-sequence modelling at desk scale.
//!
//! Text, bounding-box coordinates and image patches all share one finite
//! token vocabulary. A small encoder-decoder transformer reads mixed
//! text/patch sources and generates token sequences, so classification,
//! captioning, VQA, summarization, detection and masked modelling are all
//! the same seq2seq problem.

pub mod error;
pub mod exec;
pub mod model;
pub mod numerics;
pub mod persist;
pub mod task;
pub mod tokenization;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
pub use exec::ExecMode;
