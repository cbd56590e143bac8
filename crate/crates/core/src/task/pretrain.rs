//! Construction of the masked-modelling, detection and multi-round
//! instruction episodes.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::task::episode::{Episode, ImageSource, ObjectLabel, Pretraining, TaskKind};
use crate::tokenization::{BBox, BpeModel, VocabSizes, MASK};
use crate::vision::{patchify, quantize, subsample_patches, Codebook, Image};

fn masked_positions(n: usize, ratio: f64, seed: u64, stream: u64) -> Vec<usize> {
    let count = ((ratio * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut picked = index::sample(&mut rng, n, count).into_vec();
    picked.sort_unstable();
    picked
}

fn check_ratio(ratio: f64, allow_zero: bool) -> Result<()> {
    let ok = ratio.is_finite() && ratio <= 1.0 && (ratio > 0.0 || (allow_zero && ratio == 0.0));
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("mask ratio {ratio} out of range")))
    }
}

/// Denoising text episode: `round(ratio · n)` of the `n` BPE tokens become
/// MASK in the source; the target is the original text.
pub fn make_mlm(text: &str, bpe: &BpeModel, mask_ratio: f64, seed: u64) -> Result<Episode> {
    check_ratio(mask_ratio, true)?;
    let mut ids = bpe.encode(text);
    for i in masked_positions(ids.len(), mask_ratio, seed, 0) {
        ids[i] = MASK;
    }
    let mut e = Episode::new(TaskKind::Mlm).with_field("Text", text).with_target(text);
    e.pretraining = Some(Pretraining::Mlm { masked_ids: ids });
    Ok(e)
}

/// Masked-image episode. Patches are cut at the codebook's patch size,
/// subsampled to `max_patches`, and `round(ratio · kept)` of them masked;
/// the target lists the masked patches' vision ids in raster order.
pub fn make_mim(
    image: &Image,
    mask_ratio: f64,
    seed: u64,
    codebook: &Codebook,
    vocab: &VocabSizes,
    max_patches: usize,
) -> Result<Episode> {
    check_ratio(mask_ratio, false)?;
    let area = codebook.dim() / image.channels.max(1);
    let patch_size = (area as f64).sqrt().round() as usize;
    if patch_size * patch_size * image.channels != codebook.dim() {
        return Err(Error::Shape(format!(
            "codebook dim {} does not fit {}-channel square patches",
            codebook.dim(),
            image.channels
        )));
    }
    let grid = patchify(image, patch_size)?;
    let grid = subsample_patches(&grid, max_patches, seed)?;
    let kept = grid.kept_indices();
    if kept.is_empty() {
        return Err(Error::Data("image has no patches".into()));
    }
    let masked: Vec<usize> = masked_positions(kept.len(), mask_ratio, seed, 1).into_iter().map(|i| kept[i]).collect();
    let pixels: Vec<&[f64]> = masked.iter().map(|&r| grid.patches[r].as_slice()).collect();
    let target_ids = quantize(&pixels, codebook, vocab)?;
    let mut e = Episode::new(TaskKind::Mim).with_image(ImageSource::Loaded(image.clone()));
    e.pretraining = Some(Pretraining::Mim { kept, masked, target_ids });
    Ok(e)
}

/// Detection episode; boxes are checked against the image and stored in
/// `(y1, x1)` order.
pub fn make_od(image: ImageSource, objects: &[ObjectLabel]) -> Result<Episode> {
    if objects.is_empty() {
        return Err(Error::Validation("od episode needs at least one object".into()));
    }
    let loaded = image.load()?;
    for o in objects {
        BBox::new(o.x1, o.y1, o.x2, o.y2, loaded.width as f64, loaded.height as f64)?;
    }
    let mut sorted = objects.to_vec();
    sorted.sort_by(|a, b| a.y1.total_cmp(&b.y1).then(a.x1.total_cmp(&b.x1)));
    let mut e = Episode::new(TaskKind::Od).with_image(image);
    e.objects = Some(sorted);
    Ok(e)
}

/// Flattens a multi-round conversation about one image into one episode
/// per round; each round's source carries the earlier questions and
/// answers.
pub fn instruct_rounds(image: ImageSource, rounds: &[(String, String)]) -> Vec<Episode> {
    let mut history = String::new();
    rounds
        .iter()
        .map(|(q, a)| {
            let e = Episode::new(TaskKind::InstructRound)
                .with_image(image.clone())
                .with_field("History", &history)
                .with_field("Question", q)
                .with_target(a);
            history.push_str(&format!("Q: {q} A: {a} "));
            e
        })
        .collect()
}
