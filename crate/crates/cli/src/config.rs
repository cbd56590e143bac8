//! Run configuration: command-line flags override a JSON config file,
//! which overrides the named preset.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::Deserialize;
use uniseq_core::model::ModelConfig;
use uniseq_core::tokenization::VocabSizes;
use uniseq_core::train::{InitMode, TrainPlan};
use uniseq_core::ExecMode;

use crate::Invalid;

macro_rules! overrides {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident: $ty:ty),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, Args, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $($(#[$fmeta])* #[arg(long)] pub $field: Option<$ty>,)*
        }

        impl $name {
            /// Fields set here win; unset ones fall back to `lower`.
            pub fn or(self, lower: $name) -> $name {
                $name { $($field: self.$field.or(lower.$field),)* }
            }
        }
    };
}

overrides!(ModelOverrides {
    /// Size preset: tiny, small or base.
    preset: String,
    encoder_layers: usize,
    decoder_layers: usize,
    d_model: usize,
    heads: usize,
    d_ffn: usize,
    max_src: usize,
    max_tgt: usize,
    dropout: f64,
    /// Side of a square image patch in pixels.
    patch_size: usize,
    /// Image channels, 1 or 3. Inferred from the data when unset.
    channels: usize,
    embed_hidden: usize,
});

overrides!(PlanOverrides {
    lr: f64,
    batch_size: usize,
    epochs: usize,
    warmup_ratio: f64,
    label_smoothing: f64,
    /// Data-parallel workers; must divide the batch size.
    workers: usize,
});

pub const DEFAULT_PATCH_SIZE: usize = 8;

/// Contents of a `--config` file. Relative paths resolve against the
/// file's directory.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub vocab: Option<PathBuf>,
    pub codebook: Option<PathBuf>,
    #[serde(default)]
    pub manifests: Vec<PathBuf>,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub plan: PlanOverrides,
    pub mlm_ratio: Option<f64>,
    pub mim_ratio: Option<f64>,
    pub max_patches: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Invalid(format!("bad config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.vocab.as_mut().map(fix);
        config.codebook.as_mut().map(fix);
        config.manifests.iter_mut().for_each(fix);
        Ok(config)
    }
}

/// Builds the model config. With no preset named anywhere, `base` (for
/// example a donor checkpoint's config) is used, otherwise the tiny preset.
pub fn resolve_model(
    overrides: ModelOverrides,
    vocab: VocabSizes,
    inferred_channels: Option<usize>,
    base: Option<&ModelConfig>,
) -> anyhow::Result<ModelConfig> {
    let patch_size = overrides.patch_size.or(base.map(|b| b.patch_size)).unwrap_or(DEFAULT_PATCH_SIZE);
    let channels = overrides.channels.or(inferred_channels).or(base.map(|b| b.channels)).unwrap_or(1);
    let mut c = match (&overrides.preset, base) {
        (None, Some(b)) => b.clone(),
        (preset, _) => ModelConfig::preset(preset.as_deref().unwrap_or("tiny"), vocab, patch_size, channels)?,
    };
    c.vocab = vocab;
    c.patch_size = patch_size;
    c.channels = channels;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = overrides.$f { c.$f = v; })* };
    }
    set!(encoder_layers, decoder_layers, d_model, heads, d_ffn, max_src, max_tgt, dropout, embed_hidden);
    if overrides.d_model.is_some() && overrides.d_ffn.is_none() {
        c.d_ffn = 4 * c.d_model;
    }
    c.validate()?;
    Ok(c)
}

pub fn resolve_plan(
    overrides: PlanOverrides,
    init: InitMode,
    seed: u64,
    exec: ExecMode,
    default_epochs: usize,
) -> anyhow::Result<TrainPlan> {
    let d = TrainPlan::default();
    let plan = TrainPlan {
        init,
        lr: overrides.lr.unwrap_or(d.lr),
        batch_size: overrides.batch_size.unwrap_or(d.batch_size),
        epochs: overrides.epochs.unwrap_or(default_epochs),
        warmup_ratio: overrides.warmup_ratio.unwrap_or(d.warmup_ratio),
        label_smoothing: overrides.label_smoothing.unwrap_or(d.label_smoothing),
        seed,
        workers: overrides.workers.unwrap_or(d.workers),
        exec,
    };
    plan.validate()?;
    Ok(plan)
}

pub fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Invalid(format!("{what} {} does not exist", path.display())).into())
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> anyhow::Result<T> {
    require_file(path, what)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Invalid(format!("bad {what} {}: {e}", path.display())).into())
}
