//! Encoder-decoder transformer over the unified vocabulary.

mod config;
mod params;
mod transformer;

pub use config::{param_count, ModelConfig, PRESETS};
pub use params::{Parameters, INIT_STD};
pub use transformer::{decode_logits, encode_source, Net, SourceItem};
