use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenization::VocabSizes;
use crate::vision::EmbedderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub max_src: usize,
    pub max_tgt: usize,
    pub dropout: f64,
    pub vocab: VocabSizes,
    pub patch_size: usize,
    pub channels: usize,
    /// Feature maps in each patch-embedder convolution.
    pub embed_hidden: usize,
}

/// Shipped size presets, smallest first. Each step adds layers and width.
pub const PRESETS: [&str; 3] = ["tiny", "small", "base"];

impl ModelConfig {
    pub fn preset(name: &str, vocab: VocabSizes, patch_size: usize, channels: usize) -> Result<Self> {
        let (layers, d_model, heads) = match name {
            "tiny" => (2, 64, 4),
            "small" => (3, 96, 4),
            "base" | "base'" => (4, 128, 8),
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        let config = ModelConfig {
            encoder_layers: layers,
            decoder_layers: layers,
            d_model,
            heads,
            d_ffn: 4 * d_model,
            max_src: 512,
            max_tgt: 64,
            dropout: 0.0,
            vocab,
            patch_size,
            channels,
            embed_hidden: 4,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_ffn == 0 {
            return fail("d_model, heads and d_ffn must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail("d_model must be divisible by heads");
        }
        if self.max_src == 0 || self.max_tgt < 2 {
            return fail("max_src must be at least 1 and max_tgt at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.vocab.text == 0 || self.vocab.locations == 0 || self.vocab.vision == 0 {
            return fail("vocabulary ranges must be non-empty");
        }
        if self.patch_size == 0 || !matches!(self.channels, 1 | 3) || self.embed_hidden == 0 {
            return fail("patch size and embedder width must be positive, channels 1 or 3");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn embedder(&self) -> EmbedderConfig {
        EmbedderConfig {
            patch_size: self.patch_size,
            channels: self.channels,
            hidden: self.embed_hidden,
            d_model: self.d_model,
        }
    }

    /// Names and shapes of every parameter tensor, in storage order. The
    /// output head reuses `embed.tokens`, so it has no entry of its own.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = self.d_ffn;
        let mut out: Vec<(String, Vec<usize>)> = vec![
            ("embed.tokens".into(), vec![self.vocab.total() as usize, d]),
            ("embed.src_pos".into(), vec![self.max_src, d]),
            ("embed.tgt_pos".into(), vec![self.max_tgt, d]),
            ("embed.mask_patch".into(), vec![1, d]),
        ];
        out.extend(self.embedder().param_shapes());
        let ln = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.g"), vec![d]));
            out.push((format!("{p}.b"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for m in ["q", "k", "v", "o"] {
                out.push((format!("{p}.{m}.w"), vec![d, d]));
                out.push((format!("{p}.{m}.b"), vec![d]));
            }
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.w1"), vec![d, f]));
            out.push((format!("{p}.b1"), vec![f]));
            out.push((format!("{p}.w2"), vec![f, d]));
            out.push((format!("{p}.b2"), vec![d]));
        };
        for i in 0..self.encoder_layers {
            ln(&mut out, &format!("enc.{i}.ln1"));
            attn(&mut out, &format!("enc.{i}.self"));
            ln(&mut out, &format!("enc.{i}.ln2"));
            ffn(&mut out, &format!("enc.{i}.ffn"));
        }
        ln(&mut out, "enc.ln");
        for i in 0..self.decoder_layers {
            ln(&mut out, &format!("dec.{i}.ln1"));
            attn(&mut out, &format!("dec.{i}.self"));
            ln(&mut out, &format!("dec.{i}.ln2"));
            attn(&mut out, &format!("dec.{i}.cross"));
            ln(&mut out, &format!("dec.{i}.ln3"));
            ffn(&mut out, &format!("dec.{i}.ffn"));
        }
        ln(&mut out, "dec.ln");
        out
    }
}

/// Closed-form parameter count under weight tying.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let f = config.d_ffn;
    let (p, c, h) = (config.patch_size, config.channels, config.embed_hidden);
    let embeddings = (config.vocab.total() as usize + config.max_src + config.max_tgt + 1) * d;
    let embedder = 9 * c * h + h + 9 * h * h + h + p * p * h * d + d;
    let layer_norm = 2 * d;
    let attention = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let encoder = config.encoder_layers * (2 * layer_norm + attention + ffn) + layer_norm;
    let decoder = config.decoder_layers * (3 * layer_norm + 2 * attention + ffn) + layer_norm;
    embeddings + embedder + encoder + decoder
}
