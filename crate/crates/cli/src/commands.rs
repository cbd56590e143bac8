use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde_json::{json, Value};
use uniseq_core::model::{param_count as closed_form_count, ModelConfig, PRESETS};
use uniseq_core::persist::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
use uniseq_core::task::{serialize, Episode, Limits, TaskKind};
use uniseq_core::tokenization::{assemble, train_bpe, BpeModel, UnifiedVocabulary, VocabSizes};
use uniseq_core::train::{
    evaluate, generate, generate_greedy, grid_search, train, truncation_ablation, zero_shot_eval, DecodeMode,
    DecodeSettings, EvalContext, Grid, InitMode,
};
use uniseq_core::vision::{load_image, patchify, subsample_patches, train_codebook};

use crate::config::{read_json, require_file, resolve_model, resolve_plan, RunConfig};
use crate::data::{datasets, infer_channels, load_codebook, load_episodes, load_vocab, prepare_pretraining, Masking};
use crate::{
    AblateArgs, BpeTrainArgs, Common, DecodeArgs, EvalArgs, GenerateArgs, GridArgs, Invalid, ParamCountArgs,
    PretrainArgs, TrainArgs, VocabBuildArgs, VqTrainArgs, ZeroShotArgs,
};

pub const INSTRUCT_EPOCHS: usize = 20;
const DEFAULT_MLM_RATIO: f64 = 0.15;
const DEFAULT_MIM_RATIO: f64 = 0.4;

/// Adds the labelled `timestamp` field unless suppressed.
fn stamp(mut value: Value, common: &Common) -> Value {
    if !common.no_timestamp {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        if let Value::Object(map) = &mut value {
            map.insert("timestamp".into(), json!(secs));
        }
    }
    value
}

/// Writes `text` atomically to `out`, or to stdout.
fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => Ok(write_atomic(path, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn line(value: &Value) -> String {
    let mut s = value.to_string();
    s.push('\n');
    s
}

pub fn bpe_train(a: BpeTrainArgs) -> anyhow::Result<()> {
    let mut corpus = Vec::new();
    for path in &a.corpora {
        require_file(path, "corpus")?;
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        corpus.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }
    if corpus.is_empty() {
        return Err(Invalid("the corpus has no nonempty lines".into()).into());
    }
    let bpe = train_bpe(&corpus, a.merges);
    write_atomic(&a.out, bpe.to_text().as_bytes())?;
    emit(None, &line(&json!({ "text_tokens": bpe.num_tokens(), "merges": bpe.merges().len() })))
}

pub fn vocab_build(a: VocabBuildArgs) -> anyhow::Result<()> {
    require_file(&a.bpe, "BPE model")?;
    let text = std::fs::read_to_string(&a.bpe).with_context(|| format!("reading {}", a.bpe.display()))?;
    let vocab = assemble(BpeModel::from_text(&text)?, a.locations, a.vision)?;
    write_atomic(&a.out, vocab.to_text().as_bytes())?;
    let s = vocab.sizes();
    emit(None, &line(&json!({ "text": s.text, "locations": s.locations, "vision": s.vision, "total": s.total() })))
}

pub fn vq_train(a: VqTrainArgs) -> anyhow::Result<()> {
    let mut paths: Vec<PathBuf> = Vec::new();
    if !a.manifests.is_empty() {
        for e in load_episodes(&a.manifests)? {
            for img in &e.images {
                if let uniseq_core::task::ImageSource::Path(p) = img {
                    paths.push(p.clone());
                }
            }
        }
    }
    for p in &a.images {
        require_file(p, "image")?;
        paths.push(p.clone());
    }
    if paths.is_empty() {
        return Err(Invalid("vq-train needs images via --manifest or --image".into()).into());
    }
    let mut vectors = Vec::new();
    let mut channels = None;
    for (i, p) in paths.iter().enumerate() {
        let image = load_image(p)?;
        if *channels.get_or_insert(image.channels) != image.channels {
            return Err(Invalid(format!("{} has a different channel count from earlier images", p.display())).into());
        }
        let grid = subsample_patches(&patchify(&image, a.patch_size)?, a.max_patches, a.common.seed.wrapping_add(i as u64))?;
        vectors.extend(grid.kept_patches().into_iter().map(<[f64]>::to_vec));
    }
    let fit = train_codebook(&vectors, a.codes, a.iterations, a.common.seed, a.common.exec())?;
    write_atomic(&a.out, &fit.codebook.to_bytes())?;
    let summary = json!({
        "k": fit.codebook.k(),
        "dim": fit.codebook.dim(),
        "vectors": vectors.len(),
        "final_distortion": fit.distortion.last(),
    });
    if let Some(path) = &a.report {
        let report = stamp(json!({ "summary": summary, "distortion": fit.distortion }), &a.common);
        write_atomic(path, line(&report).as_bytes())?;
    }
    emit(None, &line(&summary))
}

struct Prepared {
    config: ModelConfig,
    vocab: UnifiedVocabulary,
    limits: Limits,
    episodes: Vec<Episode>,
    init: InitMode,
    file: RunConfig,
}

fn prepare(a: &TrainArgs) -> anyhow::Result<Prepared> {
    let file = RunConfig::load(a.config.as_deref())?;
    let vocab_path = a.vocab.clone().or(file.vocab.clone()).ok_or_else(|| Invalid("--vocab is required".into()))?;
    let vocab = load_vocab(&vocab_path)?;
    let manifests = if a.manifests.is_empty() { file.manifests.clone() } else { a.manifests.clone() };
    let episodes = load_episodes(&manifests)?;
    let (init, donor) = match &a.init {
        Some(path) => {
            require_file(path, "checkpoint")?;
            (InitMode::FromCheckpoint(path.clone()), Some(load_checkpoint(path)?))
        }
        None => (InitMode::Scratch, None),
    };
    let config = resolve_model(
        a.model.clone().or(file.model.clone()),
        vocab.sizes(),
        infer_channels(&episodes)?,
        donor.as_ref().map(Checkpoint::config),
    )?;
    let mut limits = Limits::for_model(&config);
    if let Some(m) = a.max_patches.or(file.max_patches) {
        limits.max_patches = m;
    }
    Ok(Prepared { config, vocab, limits, episodes, init, file })
}

fn run_training(a: &TrainArgs, p: Prepared, default_epochs: usize) -> anyhow::Result<()> {
    let plan = resolve_plan(a.plan.clone().or(p.file.plan.clone()), p.init, a.common.seed, a.common.exec(), default_epochs)?;
    let data = datasets(&p.episodes, &p.vocab, &p.limits, a.common.seed)?;
    let outcome = train(&plan, &data, &p.config)?;
    save_checkpoint(&a.out, &outcome.checkpoint)?;
    let summary = json!({
        "steps": outcome.losses.len(),
        "final_loss": outcome.losses.last(),
        "datasets": data.iter().map(|d| json!({ "name": d.name, "pairs": d.pairs.len() })).collect::<Vec<_>>(),
        "plan_digest": outcome.checkpoint.provenance.plan_digest,
    });
    if let Some(path) = &a.report {
        let names: Vec<&str> = outcome.sources.iter().map(|&i| data[i].name.as_str()).collect();
        let report = stamp(
            json!({ "summary": summary, "plan": plan, "config": p.config, "losses": outcome.losses, "sources": names }),
            &a.common,
        );
        write_atomic(path, line(&report).as_bytes())?;
    }
    emit(None, &line(&summary))
}

pub fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let mut p = prepare(&a.train)?;
    let codebook = match a.codebook.clone().or(p.file.codebook.clone()) {
        Some(path) => {
            let cb = load_codebook(&path)?;
            let expected = p.config.patch_size * p.config.patch_size * p.config.channels;
            if cb.dim() != expected {
                return Err(Invalid(format!(
                    "codebook dimension {} does not match {}-pixel patches with {} channels",
                    cb.dim(),
                    p.config.patch_size,
                    p.config.channels
                ))
                .into());
            }
            Some(cb)
        }
        None => None,
    };
    let masking = Masking {
        mlm_ratio: a.mlm_ratio.or(p.file.mlm_ratio).unwrap_or(DEFAULT_MLM_RATIO),
        mim_ratio: a.mim_ratio.or(p.file.mim_ratio).unwrap_or(DEFAULT_MIM_RATIO),
        codebook: codebook.as_ref(),
    };
    let episodes = std::mem::take(&mut p.episodes);
    p.episodes = prepare_pretraining(episodes, &p.vocab, &p.limits, &masking, a.train.common.seed)?;
    run_training(&a.train, p, uniseq_core::train::TrainPlan::default().epochs)
}

pub fn finetune(a: TrainArgs, default_epochs: usize) -> anyhow::Result<()> {
    let p = prepare(&a)?;
    run_training(&a, p, default_epochs)
}

struct Loaded {
    checkpoint: Checkpoint,
    vocab: UnifiedVocabulary,
    episodes: Vec<Episode>,
    limits: Limits,
}

fn load_for_eval(ckpt: &Path, vocab: &Path, manifests: &[PathBuf]) -> anyhow::Result<Loaded> {
    require_file(ckpt, "checkpoint")?;
    let checkpoint = load_checkpoint(ckpt)?;
    let vocab = load_vocab(vocab)?;
    if vocab.sizes() != checkpoint.config().vocab {
        return Err(Invalid("the vocabulary does not match the checkpoint's vocabulary sizes".into()).into());
    }
    let episodes = load_episodes(manifests)?;
    let limits = Limits::for_model(checkpoint.config());
    Ok(Loaded { checkpoint, vocab, episodes, limits })
}

fn decode_settings(d: &DecodeArgs, config: &ModelConfig) -> DecodeSettings {
    DecodeSettings {
        beam: d.beam.unwrap_or(1),
        max_len: d.max_len.unwrap_or(config.max_tgt - 1),
        mode: if d.constrained { DecodeMode::Constrained } else { DecodeMode::Open },
    }
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let l = load_for_eval(&a.ckpt, &a.vocab, &a.manifests)?;
    let ctx = EvalContext {
        vocab: &l.vocab,
        limits: &l.limits,
        decode: decode_settings(&a.decode, l.checkpoint.config()),
        seed: a.common.seed,
        exec: a.common.exec(),
    };
    let report = evaluate(&l.checkpoint.params, &l.episodes, &a.metrics, &ctx)?;
    let mut text = String::new();
    for r in &report.records {
        text.push_str(&line(&serde_json::to_value(r)?));
    }
    text.push_str(&line(&stamp(json!({ "summary": report.summary }), &a.common)));
    emit(a.out.as_deref(), &text)
}

pub fn generate_cmd(a: GenerateArgs) -> anyhow::Result<()> {
    let l = load_for_eval(&a.ckpt, &a.vocab, &a.manifests)?;
    let settings = decode_settings(&a.decode, l.checkpoint.config());
    let greedy_path = a.decode.beam.is_none() && !a.decode.constrained;
    let outputs = a.common.exec().map(&l.episodes, |e| -> anyhow::Result<String> {
        let pair = serialize(e, &l.vocab, &l.limits, a.common.seed)?;
        let g = if greedy_path {
            generate_greedy(&l.checkpoint.params, &l.vocab, &pair.source, settings.max_len)?
        } else {
            let answers = match settings.mode {
                DecodeMode::Open => None,
                DecodeMode::Constrained => Some(
                    e.answer_set
                        .as_deref()
                        .ok_or_else(|| Invalid(format!("{} episode has no answer_set", e.task)))?,
                ),
            };
            generate(&l.checkpoint.params, &l.vocab, &pair.source, &settings, answers)?
        };
        Ok(line(&json!({
            "digest": uniseq_core::train::source_digest(&pair.source),
            "task": e.task,
            "text": g.text,
            "tokens": g.tokens,
            "score": g.score,
        })))
    });
    let text = outputs.into_iter().collect::<anyhow::Result<Vec<String>>>()?.concat();
    emit(a.out.as_deref(), &text)
}

pub fn gridsearch(a: GridArgs) -> anyhow::Result<()> {
    let train_args = TrainArgs {
        config: a.config.clone(),
        vocab: a.vocab.clone(),
        manifests: a.manifests.clone(),
        init: a.init.clone(),
        out: PathBuf::new(),
        report: None,
        max_patches: None,
        model: a.model.clone(),
        plan: a.plan.clone(),
        common: a.common,
    };
    let p = prepare(&train_args)?;
    let base = resolve_plan(
        a.plan.clone().or(p.file.plan.clone()),
        p.init.clone(),
        a.common.seed,
        a.common.exec(),
        uniseq_core::train::TrainPlan::default().epochs,
    )?;
    let data = datasets(&p.episodes, &p.vocab, &p.limits, a.common.seed)?;
    let dev = load_episodes(&a.dev)?;
    let grid = Grid {
        lrs: a.lrs.clone(),
        batch_sizes: a.batch_sizes.clone(),
        epochs: a.epoch_grid.clone(),
        warmup_ratios: a.warmup_ratios.clone(),
    };
    let ctx = EvalContext {
        vocab: &p.vocab,
        limits: &p.limits,
        decode: decode_settings(&a.decode, &p.config),
        seed: a.common.seed,
        exec: a.common.exec(),
    };
    let result = grid_search(&grid, &base, &p.config, &data, &dev, a.metric, &ctx)?;
    let cell = |plan: &uniseq_core::train::TrainPlan, score: f64| {
        json!({
            "lr": plan.lr,
            "batch_size": plan.batch_size,
            "epochs": plan.epochs,
            "warmup_ratio": plan.warmup_ratio,
            "dev_score": score,
        })
    };
    let report = json!({
        "metric": a.metric.key(),
        "best": cell(&result.best, result.best_score),
        "cells": result.cells.iter().map(|c| cell(&c.plan, c.dev_score)).collect::<Vec<_>>(),
    });
    emit(a.out.as_deref(), &line(&stamp(report, &a.common)))
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let l = load_for_eval(&a.ckpt, &a.vocab, &a.manifests)?;
    let ctx = EvalContext {
        vocab: &l.vocab,
        limits: &l.limits,
        decode: decode_settings(&a.decode, l.checkpoint.config()),
        seed: a.common.seed,
        exec: a.common.exec(),
    };
    let result = truncation_ablation(&l.checkpoint.params, &l.episodes, a.cap, a.metric, &ctx)?;
    let mut report = serde_json::to_value(&result)?;
    report["metric"] = json!(a.metric.key());
    emit(a.out.as_deref(), &line(&stamp(report, &a.common)))
}

pub fn zero_shot(a: ZeroShotArgs) -> anyhow::Result<()> {
    let l = load_for_eval(&a.ckpt, &a.vocab, &a.manifests)?;
    let classes: BTreeMap<TaskKind, Vec<String>> = match &a.classes {
        Some(path) => read_json(path, "class map")?,
        None => BTreeMap::new(),
    };
    let config = l.checkpoint.config();
    let ctx = EvalContext {
        vocab: &l.vocab,
        limits: &l.limits,
        decode: DecodeSettings {
            beam: a.beam.unwrap_or(1),
            max_len: a.max_len.unwrap_or(config.max_tgt - 1),
            mode: DecodeMode::Open,
        },
        seed: a.common.seed,
        exec: a.common.exec(),
    };
    let reports = zero_shot_eval(&l.checkpoint.params, &l.episodes, &classes, &ctx)?;
    emit(a.out.as_deref(), &line(&stamp(json!({ "tasks": reports }), &a.common)))
}

pub fn param_count(a: ParamCountArgs) -> anyhow::Result<()> {
    let sizes = match (&a.vocab, a.sizes.as_slice()) {
        (Some(path), _) => load_vocab(path)?.sizes(),
        (None, [t, l, v]) => VocabSizes { text: *t, locations: *l, vision: *v },
        (None, []) => VocabSizes { text: 50_265, locations: 1000, vision: 8192 },
        _ => return Err(Invalid("--sizes takes exactly three values T,L,V".into()).into()),
    };
    let mut text = String::new();
    for name in PRESETS {
        let c = ModelConfig::preset(name, sizes, a.patch_size, a.channels)?;
        let enumerated: usize = c.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        text.push_str(&line(&json!({
            "preset": name,
            "layers": c.encoder_layers,
            "d_model": c.d_model,
            "heads": c.heads,
            "params": closed_form_count(&c),
            "enumerated": enumerated,
        })));
    }
    emit(None, &text)
}
