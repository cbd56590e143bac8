//! Synthetic data shared by the integration tests.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use uniseq_core::model::ModelConfig;
use uniseq_core::task::{Episode, ImageSource, TaskKind};
use uniseq_core::tokenization::VocabSizes;
use uniseq_core::vision::{encode_pnm, Image};

pub const PATTERNS: [&str; 4] = ["horizontal stripes", "vertical stripes", "checks", "dots"];
pub const TONES: [&str; 4] = ["dark", "dim", "light", "bright"];
pub const SCALES: [&str; 2] = ["fine", "coarse"];
pub const SIDE: usize = 16;

/// Raw 8-bit samples of a `SIDE`×`SIDE` grayscale texture. `shift` moves
/// the pattern phase and `noise` adds uniform jitter to every pixel.
pub fn texture_bytes(pattern: usize, tone: usize, scale: usize, shift: (usize, usize), noise: Option<(&mut ChaCha8Rng, u8)>) -> Vec<u8> {
    let period = if scale == 0 { 2 } else { 4 };
    let half = period / 2;
    let hi = 70 + 60 * tone as u8;
    let mut bytes = vec![0u8; SIDE * SIDE];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (yy, xx) = (y + shift.0, x + shift.1);
            let on = match pattern {
                0 => (yy / half) % 2 == 0,
                1 => (xx / half) % 2 == 0,
                2 => (yy / half + xx / half) % 2 == 0,
                _ => yy % period == 0 && xx % period == 0,
            };
            bytes[y * SIDE + x] = if on { hi } else { 10 };
        }
    }
    if let Some((rng, amp)) = noise {
        for b in &mut bytes {
            let d = rng.random_range(0..=2 * amp as i32) - amp as i32;
            *b = (*b as i32 + d).clamp(0, 255) as u8;
        }
    }
    bytes
}

pub fn caption(pattern: usize, tone: usize, scale: usize) -> String {
    format!("{} {} {}", SCALES[scale], TONES[tone], PATTERNS[pattern])
}

/// The 32 distinct noise-free textures with their captions.
pub fn texture_episodes() -> Vec<Episode> {
    let mut out = Vec::new();
    for p in 0..PATTERNS.len() {
        for t in 0..TONES.len() {
            for s in 0..SCALES.len() {
                let img = Image::from_bytes(SIDE, SIDE, 1, &texture_bytes(p, t, s, (0, 0), None)).unwrap();
                out.push(
                    Episode::new(TaskKind::Captioning)
                        .with_image(ImageSource::Loaded(img))
                        .with_target(&caption(p, t, s)),
                );
            }
        }
    }
    out
}

/// `n` textures with random class, phase and pixel noise.
pub fn jittered_texture_episodes(rng: &mut ChaCha8Rng, n: usize) -> Vec<Episode> {
    (0..n)
        .map(|_| {
            let (p, t, s) = (rng.random_range(0..4), rng.random_range(0..4), rng.random_range(0..2));
            let shift = (rng.random_range(0..4), rng.random_range(0..4));
            let bytes = texture_bytes(p, t, s, shift, Some((rng, 6)));
            let img = Image::from_bytes(SIDE, SIDE, 1, &bytes).unwrap();
            Episode::new(TaskKind::Captioning).with_image(ImageSource::Loaded(img)).with_target(&caption(p, t, s))
        })
        .collect()
}

pub fn texture_corpus() -> Vec<String> {
    let mut corpus = Vec::new();
    for p in 0..4 {
        for t in 0..4 {
            for s in 0..2 {
                corpus.push(caption(p, t, s));
            }
        }
    }
    corpus.push(uniseq_core::task::template_text(TaskKind::Captioning).to_string());
    corpus
}

pub const NEEDLE_YES: &str = "malignant";
pub const NEEDLE_NO: &str = "benign";
pub const FILLER: [&str; 8] = ["note", "vital", "stable", "chart", "record", "nurse", "daily", "plan"];
pub const LEAD_WORDS: usize = 60;

/// A long clinical-style note whose answer is decided only by words after
/// the first `LEAD_WORDS` words. Each tail word is the needle with
/// probability one half, and one extra needle is always inserted.
pub fn needle_episode(rng: &mut ChaCha8Rng, yes: bool) -> Episode {
    let needle = if yes { NEEDLE_YES } else { NEEDLE_NO };
    let mut words: Vec<&str> = std::iter::repeat_n("routine", LEAD_WORDS).collect();
    let tail = rng.random_range(8..20);
    let mut rest: Vec<&str> =
        (0..tail).map(|_| if rng.random_bool(0.5) { needle } else { *FILLER.choose(rng).unwrap() }).collect();
    let at = rng.random_range(0..=rest.len());
    rest.insert(at, needle);
    words.extend(rest);
    Episode::new(TaskKind::QaContext)
        .with_field("Context", &words.join(" "))
        .with_field("Question", "is it cancer")
        .with_target(if yes { "yes" } else { "no" })
        .with_answer_set(&["yes", "no"])
}

/// A very small model for gradient and decoding checks.
pub fn micro_config(vocab: VocabSizes) -> ModelConfig {
    ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        d_model: 8,
        heads: 2,
        d_ffn: 16,
        max_src: 16,
        max_tgt: 8,
        dropout: 0.0,
        vocab,
        patch_size: 2,
        channels: 1,
        embed_hidden: 2,
    }
}

pub fn write_pgm(path: &Path, bytes: &[u8]) {
    std::fs::write(path, encode_pnm(SIDE, SIDE, 1, bytes).unwrap()).unwrap();
}

/// Writes a small end-to-end pipeline input set into `dir`: textures,
/// a text corpus, task and pretraining manifests, a class map and a run
/// config. All paths inside are relative to `dir`.
pub fn write_pipeline_inputs(dir: &Path) {
    let mut train = Vec::new();
    let mut corpus = texture_corpus();
    for (i, (p, t, s)) in [(0, 0, 0), (1, 3, 1), (2, 1, 0), (3, 2, 1), (0, 3, 1), (1, 0, 0), (2, 2, 1), (3, 1, 0)]
        .into_iter()
        .enumerate()
    {
        write_pgm(&dir.join(format!("img{i}.pgm")), &texture_bytes(p, t, s, (0, 0), None));
        train.push(serde_json::json!({ "task": "captioning", "images": [format!("img{i}.pgm")], "target": caption(p, t, s) }));
    }
    train.push(serde_json::json!({
        "task": "vqa", "images": ["img0.pgm"], "text": { "Question": "is it dark" },
        "target": "yes", "answer_set": ["yes", "no"]
    }));
    train.push(serde_json::json!({
        "task": "summarization", "text": { "Text": "the patient is stable and well today" }, "target": "stable"
    }));
    let pre = [
        serde_json::json!({ "task": "mlm", "text": { "Text": "the patient is stable" } }),
        serde_json::json!({ "task": "mim", "images": ["img1.pgm"] }),
        serde_json::json!({
            "task": "od", "images": ["img2.pgm"],
            "objects": [{ "x1": 8, "y1": 8, "x2": 15, "y2": 15, "label": "spot" }, { "x1": 0, "y1": 0, "x2": 4, "y2": 4, "label": "dot" }]
        }),
    ];
    let lines = |v: &[serde_json::Value]| v.iter().map(|r| format!("{r}\n")).collect::<String>();
    std::fs::write(dir.join("train.jsonl"), lines(&train)).unwrap();
    std::fs::write(dir.join("pre.jsonl"), lines(&pre)).unwrap();
    corpus.extend(["the patient is stable and well today", "is it dark yes no spot dot"].map(String::from));
    std::fs::write(dir.join("corpus.txt"), corpus.join("\n") + "\n").unwrap();
    std::fs::write(dir.join("classes.json"), r#"{"vqa":["yes","no"]}"#).unwrap();
    let run = serde_json::json!({
        "vocab": "v.uvocab",
        "manifests": ["train.jsonl"],
        "model": { "preset": "tiny", "d_model": 32, "encoder_layers": 1, "decoder_layers": 1, "max_tgt": 16 },
        "plan": { "batch_size": 4, "epochs": 2 }
    });
    std::fs::write(dir.join("run.json"), run.to_string()).unwrap();
}

pub fn uniseq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniseq")).args(args).current_dir(dir).output().expect("binary runs")
}

/// Every subcommand over the pipeline inputs, in dependency order.
pub const PIPELINE: &[&[&str]] = &[
    &["bpe-train", "--corpus", "corpus.txt", "--merges", "40", "--out", "m.bpe"],
    &["vocab-build", "--bpe", "m.bpe", "--locations", "16", "--vision", "32", "--out", "v.uvocab"],
    &["vq-train", "--manifest", "train.jsonl", "--codes", "8", "--iterations", "5", "--out", "c.uvqc", "--report", "vq.json", "--no-timestamp"],
    &["pretrain", "--config", "run.json", "--manifest", "pre.jsonl", "--codebook", "c.uvqc", "--batch-size", "1", "--out", "pre.ckpt", "--report", "pre.json", "--no-timestamp"],
    &["finetune", "--config", "run.json", "--init", "pre.ckpt", "--out", "ft.ckpt", "--report", "ft.json", "--no-timestamp"],
    &["instruct", "--config", "run.json", "--init", "ft.ckpt", "--epochs", "1", "--workers", "2", "--out", "in.ckpt", "--no-timestamp"],
    &["eval", "--ckpt", "in.ckpt", "--vocab", "v.uvocab", "--manifest", "train.jsonl", "--metrics", "accuracy,rouge_l,cider", "--out", "eval.jsonl", "--no-timestamp"],
    &["generate", "--ckpt", "in.ckpt", "--vocab", "v.uvocab", "--manifest", "train.jsonl", "--out", "gen.jsonl"],
    &["generate", "--ckpt", "in.ckpt", "--vocab", "v.uvocab", "--manifest", "train.jsonl", "--beam", "3", "--out", "gen3.jsonl"],
    &["gridsearch", "--config", "run.json", "--dev", "train.jsonl", "--lrs", "1e-3,3e-3", "--batch-sizes", "4", "--epoch-grid", "1", "--out", "grid.json", "--no-timestamp"],
    &["ablate-truncation", "--ckpt", "in.ckpt", "--vocab", "v.uvocab", "--manifest", "train.jsonl", "--cap", "2", "--metric", "rouge_l", "--out", "ablate.json", "--no-timestamp"],
    &["zero-shot", "--ckpt", "in.ckpt", "--vocab", "v.uvocab", "--manifest", "train.jsonl", "--classes", "classes.json", "--out", "zs.json", "--no-timestamp"],
    &["param-count", "--vocab", "v.uvocab"],
];
