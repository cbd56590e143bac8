//! Manifest loading and conversion of episodes into training pairs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use uniseq_core::task::{load_manifest, make_mim, make_mlm, make_od, serialize, Episode, Limits, TaskKind};
use uniseq_core::tokenization::UnifiedVocabulary;
use uniseq_core::train::Dataset;
use uniseq_core::vision::Codebook;

use crate::config::require_file;
use crate::Invalid;

pub fn load_episodes(manifests: &[PathBuf]) -> anyhow::Result<Vec<Episode>> {
    if manifests.is_empty() {
        return Err(Invalid("at least one --manifest is required".into()).into());
    }
    let mut out = Vec::new();
    for m in manifests {
        require_file(m, "manifest")?;
        out.extend(load_manifest(m)?);
    }
    for e in &out {
        for img in &e.images {
            if let uniseq_core::task::ImageSource::Path(p) = img {
                require_file(p, "image")?;
            }
        }
    }
    Ok(out)
}

/// Channel count of the first image referenced by any episode.
pub fn infer_channels(episodes: &[Episode]) -> anyhow::Result<Option<usize>> {
    match episodes.iter().flat_map(|e| e.images.first()).next() {
        Some(img) => Ok(Some(img.load()?.channels)),
        None => Ok(None),
    }
}

pub struct Masking<'a> {
    pub mlm_ratio: f64,
    pub mim_ratio: f64,
    pub codebook: Option<&'a Codebook>,
}

/// Replaces raw mlm/mim/od records with their prepared episodes. Episode
/// `i` masks with seed `seed + i`.
pub fn prepare_pretraining(
    episodes: Vec<Episode>,
    vocab: &UnifiedVocabulary,
    limits: &Limits,
    masking: &Masking<'_>,
    seed: u64,
) -> anyhow::Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(episodes.len());
    for (i, e) in episodes.into_iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let prepared = match e.task {
            TaskKind::Mlm => {
                let text = e.text.get("Text").ok_or_else(|| Invalid("mlm record needs a Text field".into()))?;
                make_mlm(text, vocab.bpe(), masking.mlm_ratio, s)?
            }
            TaskKind::Mim => {
                let codebook =
                    masking.codebook.ok_or_else(|| Invalid("mim records need --codebook".into()))?;
                let image = e.images[0].load()?;
                make_mim(&image, masking.mim_ratio, s, codebook, &vocab.sizes(), limits.max_patches)?
            }
            TaskKind::Od => make_od(e.images[0].clone(), e.objects.as_deref().unwrap_or_default())?,
            _ => e,
        };
        out.push(prepared);
    }
    Ok(out)
}

/// Serializes every episode and groups the pairs into one dataset per task.
pub fn datasets(
    episodes: &[Episode],
    vocab: &UnifiedVocabulary,
    limits: &Limits,
    seed: u64,
) -> anyhow::Result<Vec<Dataset>> {
    let mut by_task: BTreeMap<TaskKind, Vec<_>> = BTreeMap::new();
    for e in episodes {
        by_task.entry(e.task).or_default().push(serialize(e, vocab, limits, seed)?);
    }
    Ok(by_task.into_iter().map(|(task, pairs)| Dataset { name: task.name().to_string(), pairs }).collect())
}

pub fn load_vocab(path: &Path) -> anyhow::Result<UnifiedVocabulary> {
    require_file(path, "vocabulary")?;
    Ok(UnifiedVocabulary::load(path)?)
}

pub fn load_codebook(path: &Path) -> anyhow::Result<Codebook> {
    require_file(path, "codebook")?;
    Ok(Codebook::load(path)?)
}
