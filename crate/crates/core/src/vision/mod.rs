//! Image ingestion, patching, the frozen k-means quantizer and the
//! trainable patch embedder.

pub mod codebook;
pub mod embedder;
pub mod image;
pub mod patches;

pub use codebook::{quantize, train_codebook, Codebook, KMeansFit};
pub use embedder::{embed_patches, EmbedderConfig, EmbedderNodes};
pub use image::{decode_pnm, encode_pnm, load_image, Image};
pub use patches::{patchify, subsample_patches, PatchGrid};
