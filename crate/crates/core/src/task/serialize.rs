use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SourceItem};
use crate::task::episode::{Episode, Pretraining, TaskKind};
use crate::task::template::{field_value, template_for, Segment};
use crate::tokenization::{box_to_tokens, BBox, UnifiedVocabulary, BOS, EOS, SEP};
use crate::vision::{patchify, subsample_patches, Image};

/// Most patches kept per image.
pub const DEFAULT_MAX_PATCHES: usize = 196;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub max_src: usize,
    pub max_tgt: usize,
    pub max_patches: usize,
    pub patch_size: usize,
    /// When set, every text field is cut to this many BPE tokens before
    /// templating.
    pub field_token_cap: Option<usize>,
}

impl Limits {
    pub fn for_model(config: &ModelConfig) -> Self {
        Limits {
            max_src: config.max_src,
            max_tgt: config.max_tgt,
            max_patches: DEFAULT_MAX_PATCHES,
            patch_size: config.patch_size,
            field_token_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPair {
    pub source: Vec<SourceItem>,
    /// `BOS … EOS`.
    pub target: Vec<u32>,
    /// Source positions of each image's patch block, in placeholder order.
    /// Blocks cut by truncation are shortened or empty.
    pub image_spans: Vec<Range<usize>>,
    /// Token counts of each text field after the cap, in template order.
    pub field_tokens: Vec<usize>,
}

fn image_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn patch_items(
    image: &Image,
    k: usize,
    episode: &Episode,
    limits: &Limits,
    seed: u64,
) -> Result<Vec<SourceItem>> {
    let grid = patchify(image, limits.patch_size)?;
    let (kept, masked) = match &episode.pretraining {
        Some(Pretraining::Mim { kept, masked, .. }) => (kept.clone(), masked.clone()),
        _ => (subsample_patches(&grid, limits.max_patches, image_seed(seed, k))?.kept_indices(), Vec::new()),
    };
    kept.into_iter()
        .map(|raster| {
            let pixels = grid
                .patches
                .get(raster)
                .ok_or_else(|| Error::Data(format!("patch {raster} outside a {}-patch grid", grid.patches.len())))?;
            Ok(if masked.binary_search(&raster).is_ok() {
                SourceItem::Patch { pixels: Vec::new(), raster, masked: true }
            } else {
                SourceItem::Patch { pixels: pixels.clone(), raster, masked: false }
            })
        })
        .collect()
}

fn od_target(episode: &Episode, image: &Image, vocab: &UnifiedVocabulary) -> Result<Vec<u32>> {
    let objects = episode.objects.as_deref().unwrap_or_default();
    if objects.is_empty() {
        return Err(Error::Data("od episode without objects".into()));
    }
    let mut sorted: Vec<_> = objects.iter().collect();
    sorted.sort_by(|a, b| a.y1.total_cmp(&b.y1).then(a.x1.total_cmp(&b.x1)));
    let mut out = Vec::new();
    for (i, o) in sorted.into_iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        let b = BBox::new(o.x1, o.y1, o.x2, o.y2, image.width as f64, image.height as f64)?;
        out.extend(box_to_tokens(&b, &vocab.sizes())?);
        out.extend(vocab.encode(&o.label));
    }
    Ok(out)
}

/// Target body (without BOS/EOS) for any episode.
pub fn target_ids(episode: &Episode, vocab: &UnifiedVocabulary, images: &[Image]) -> Result<Vec<u32>> {
    match (episode.task, &episode.pretraining) {
        (TaskKind::Mim, Some(Pretraining::Mim { target_ids, .. })) => Ok(target_ids.clone()),
        (TaskKind::Mim, _) => Err(Error::Data("mim episode without masking payload".into())),
        (TaskKind::Od, _) => od_target(episode, &images[0], vocab),
        _ => {
            let ids = vocab.encode(&episode.target);
            if ids.is_empty() {
                return Err(Error::Data(format!("{} episode has an empty target", episode.task)));
            }
            Ok(ids)
        }
    }
}

/// Turns an episode into model inputs. Images expand in place of their
/// placeholders, literals and fields are BPE-encoded separately, and the
/// source is cut from the right at `max_src`.
pub fn serialize(episode: &Episode, vocab: &UnifiedVocabulary, limits: &Limits, seed: u64) -> Result<RenderedPair> {
    episode.validate()?;
    if limits.max_tgt < 2 {
        return Err(Error::Config("max_tgt must leave room for BOS and EOS".into()));
    }
    let images = episode.images.iter().map(|i| i.load()).collect::<Result<Vec<_>>>()?;
    let mut source = Vec::new();
    let mut image_spans = Vec::new();
    let mut field_tokens = Vec::new();
    let mut next_image = 0;
    for seg in template_for(episode.task).segments {
        match seg {
            Segment::Literal(s) => source.extend(vocab.encode(&s).into_iter().map(SourceItem::Text)),
            Segment::Field(name) => {
                let mut ids = match (&episode.pretraining, name.as_str()) {
                    (Some(Pretraining::Mlm { masked_ids }), "Text") => masked_ids.clone(),
                    _ => vocab.encode(field_value(episode, &name)?),
                };
                if let Some(cap) = limits.field_token_cap {
                    ids.truncate(cap);
                }
                field_tokens.push(ids.len());
                source.extend(ids.into_iter().map(SourceItem::Text));
            }
            Segment::Image => {
                let items = patch_items(&images[next_image], next_image, episode, limits, seed)?;
                image_spans.push(source.len()..source.len() + items.len());
                source.extend(items);
                next_image += 1;
            }
        }
    }
    source.truncate(limits.max_src);
    for span in &mut image_spans {
        span.start = span.start.min(limits.max_src);
        span.end = span.end.min(limits.max_src);
    }
    let mut target = vec![BOS];
    target.extend(target_ids(episode, vocab, &images)?);
    target.truncate(limits.max_tgt - 1);
    target.push(EOS);
    Ok(RenderedPair { source, target, image_spans, field_tokens })
}
