//! Evaluation, grid search, and the ablation, zero-shot and
//! continual-training harnesses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{ModelConfig, Parameters, SourceItem};
use crate::task::{serialize, Episode, Limits, TaskKind};
use crate::tokenization::{UnifiedVocabulary, BOS, EOS};
use crate::train::decode::{generate, DecodeMode, DecodeSettings};
use crate::train::metrics::{accuracy, cider, normalize_answer, rouge_l, CIDER_MAX_N, CIDER_SCALE, ROUGE_BETA};
use crate::train::trainer::{train, Dataset, InitMode, TrainPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    RougeL,
    Cider,
}

impl Metric {
    /// The summary key used to rank runs by this metric.
    pub fn key(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::RougeL => "rouge_l_f",
            Metric::Cider => "cider",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub digest: String,
    pub task: TaskKind,
    pub generated: String,
    pub reference: String,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    pub rouge_beta: f64,
    pub cider_max_n: usize,
    pub cider_scale: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        MetricParams { rouge_beta: ROUGE_BETA, cider_max_n: CIDER_MAX_N, cider_scale: CIDER_SCALE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub means: BTreeMap<String, f64>,
    pub metric_params: MetricParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

impl EvalReport {
    pub fn score(&self, metric: Metric) -> Option<f64> {
        self.summary.means.get(metric.key()).copied()
    }
}

/// Short SHA-256 of a serialized source.
pub fn source_digest(source: &[SourceItem]) -> String {
    let mut h = Sha256::new();
    for item in source {
        match item {
            SourceItem::Text(id) => {
                h.update([0u8]);
                h.update(id.to_le_bytes());
            }
            SourceItem::Patch { pixels, raster, masked } => {
                h.update([1u8, *masked as u8]);
                h.update((*raster as u64).to_le_bytes());
                for p in pixels {
                    h.update(p.to_bits().to_le_bytes());
                }
            }
        }
    }
    hex::encode(&h.finalize()[..8])
}

/// Everything needed to turn episodes into predictions.
#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub vocab: &'a UnifiedVocabulary,
    pub limits: &'a Limits,
    pub decode: DecodeSettings,
    pub seed: u64,
    pub exec: ExecMode,
}

pub struct Prediction {
    pub digest: String,
    pub generated: String,
    pub reference: String,
}

/// Generates one output per episode, in parallel across episodes.
pub fn predict(params: &Parameters, episodes: &[Episode], ctx: &EvalContext<'_>) -> Result<Vec<Prediction>> {
    let results = ctx.exec.map(episodes, |e| -> Result<Prediction> {
        let pair = serialize(e, ctx.vocab, ctx.limits, ctx.seed)?;
        let answers = match ctx.decode.mode {
            DecodeMode::Open => None,
            DecodeMode::Constrained => Some(e.answer_set.as_deref().ok_or_else(|| {
                Error::Validation(format!("{} episode has no answer_set for constrained decoding", e.task))
            })?),
        };
        let g = generate(params, ctx.vocab, &pair.source, &ctx.decode, answers)?;
        let reference = if e.task.has_text_target() {
            e.target.clone()
        } else {
            let body: Vec<u32> = pair.target.iter().copied().filter(|&t| t != BOS && t != EOS).collect();
            ctx.vocab.render(&body)
        };
        Ok(Prediction { digest: source_digest(&pair.source), generated: g.text, reference })
    });
    results.into_iter().collect()
}

/// Scores predictions. Accuracy and ROUGE-L are per episode; CIDEr is
/// computed over the whole set with each episode's target as its single
/// reference.
pub fn score_predictions(episodes: &[Episode], preds: Vec<Prediction>, metrics: &[Metric]) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let cider_scores = if metrics.contains(&Metric::Cider) {
        let cands: Vec<String> = preds.iter().map(|p| p.generated.clone()).collect();
        let refs: Vec<Vec<String>> = preds.iter().map(|p| vec![p.reference.clone()]).collect();
        Some(cider(&cands, &refs)?)
    } else {
        None
    };
    let mut records = Vec::with_capacity(preds.len());
    for (i, (p, e)) in preds.into_iter().zip(episodes).enumerate() {
        let mut scores = BTreeMap::new();
        for m in metrics {
            match m {
                Metric::Accuracy => {
                    scores.insert("accuracy".into(), accuracy(&[&p.generated], &[&p.reference])?);
                }
                Metric::RougeL => {
                    let r = rouge_l(&p.generated, &p.reference);
                    scores.insert("rouge_l_p".into(), r.precision);
                    scores.insert("rouge_l_r".into(), r.recall);
                    scores.insert("rouge_l_f".into(), r.f);
                }
                Metric::Cider => {
                    scores.insert("cider".into(), cider_scores.as_ref().unwrap().per_item[i]);
                }
            }
        }
        records.push(EvalRecord {
            digest: p.digest,
            task: e.task,
            generated: p.generated,
            reference: p.reference,
            scores,
        });
    }
    let mut means: BTreeMap<String, f64> = BTreeMap::new();
    for r in &records {
        for (k, v) in &r.scores {
            *means.entry(k.clone()).or_default() += v;
        }
    }
    for v in means.values_mut() {
        *v /= records.len() as f64;
    }
    if let Some(c) = &cider_scores {
        means.insert("cider".into(), c.mean);
    }
    let summary = EvalSummary { count: records.len(), means, metric_params: MetricParams::default() };
    Ok(EvalReport { records, summary })
}

pub fn evaluate(
    params: &Parameters,
    episodes: &[Episode],
    metrics: &[Metric],
    ctx: &EvalContext<'_>,
) -> Result<EvalReport> {
    let preds = predict(params, episodes, ctx)?;
    score_predictions(episodes, preds, metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lrs: Vec<f64>,
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    pub warmup_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub plan: TrainPlan,
    pub dev_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: TrainPlan,
    pub best_score: f64,
    pub cells: Vec<GridCell>,
}

impl Grid {
    /// Every combination, learning rate varying slowest.
    pub fn plans(&self, base: &TrainPlan) -> Result<Vec<TrainPlan>> {
        if self.lrs.is_empty() || self.batch_sizes.is_empty() || self.epochs.is_empty() || self.warmup_ratios.is_empty() {
            return Err(Error::Validation("every grid axis needs at least one value".into()));
        }
        let mut out = Vec::new();
        for &lr in &self.lrs {
            for &batch_size in &self.batch_sizes {
                for &epochs in &self.epochs {
                    for &warmup_ratio in &self.warmup_ratios {
                        out.push(TrainPlan { lr, batch_size, epochs, warmup_ratio, ..base.clone() });
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Runs `score` on every grid cell and keeps the best. Equal scores prefer
/// the lower learning rate, then the smaller batch, then fewer epochs,
/// then the lower warmup ratio.
pub fn grid_search_with<F>(grid: &Grid, base: &TrainPlan, exec: ExecMode, score: F) -> Result<GridResult>
where
    F: Fn(&TrainPlan) -> Result<f64> + Sync + Send,
{
    let plans = grid.plans(base)?;
    let scores = exec.map(&plans, |p| score(p));
    let mut cells = Vec::with_capacity(plans.len());
    for (plan, s) in plans.into_iter().zip(scores) {
        cells.push(GridCell { plan, dev_score: s? });
    }
    let better = |a: &GridCell, b: &GridCell| {
        a.dev_score
            .total_cmp(&b.dev_score)
            .then(b.plan.lr.total_cmp(&a.plan.lr))
            .then(b.plan.batch_size.cmp(&a.plan.batch_size))
            .then(b.plan.epochs.cmp(&a.plan.epochs))
            .then(b.plan.warmup_ratio.total_cmp(&a.plan.warmup_ratio))
            .is_gt()
    };
    let mut best = 0;
    for i in 1..cells.len() {
        if better(&cells[i], &cells[best]) {
            best = i;
        }
    }
    Ok(GridResult { best: cells[best].plan.clone(), best_score: cells[best].dev_score, cells })
}

/// Trains one model per grid cell and ranks the cells by `metric` on the
/// dev episodes.
pub fn grid_search(
    grid: &Grid,
    base: &TrainPlan,
    config: &ModelConfig,
    train_data: &[Dataset],
    dev: &[Episode],
    metric: Metric,
    ctx: &EvalContext<'_>,
) -> Result<GridResult> {
    if dev.is_empty() {
        return Err(Error::Data("grid search needs a nonempty dev split".into()));
    }
    grid_search_with(grid, base, ctx.exec, |plan| {
        let outcome = train(plan, train_data, config)?;
        let report = evaluate(&outcome.checkpoint.params, dev, &[metric], ctx)?;
        Ok(report.score(metric).unwrap_or(0.0))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub cap: usize,
    pub full: f64,
    pub truncated: f64,
    /// `truncated − full`.
    pub delta: f64,
    /// Largest text-field token count after the cap, over all episodes.
    pub max_field_tokens: usize,
}

/// Evaluates the same episodes twice, once as is and once with every text
/// field cut to `cap` BPE tokens before templating.
pub fn truncation_ablation(
    params: &Parameters,
    episodes: &[Episode],
    cap: usize,
    metric: Metric,
    ctx: &EvalContext<'_>,
) -> Result<AblationResult> {
    let full = evaluate(params, episodes, &[metric], ctx)?.score(metric).unwrap_or(0.0);
    let capped = Limits { field_token_cap: Some(cap), ..ctx.limits.clone() };
    let cut_ctx = EvalContext { limits: &capped, ..*ctx };
    let truncated = evaluate(params, episodes, &[metric], &cut_ctx)?.score(metric).unwrap_or(0.0);
    let mut max_field_tokens = 0;
    for e in episodes {
        let pair = serialize(e, ctx.vocab, &capped, ctx.seed)?;
        max_field_tokens = max_field_tokens.max(pair.field_tokens.iter().copied().max().unwrap_or(0));
    }
    Ok(AblationResult { cap, full, truncated, delta: truncated - full, max_field_tokens })
}

/// Maps generated text onto a class: normalized exact match first, then the
/// unique class contained in the text.
pub fn map_to_class<'c>(generated: &str, classes: &'c [String]) -> Option<&'c str> {
    let g = normalize_answer(generated);
    if let Some(c) = classes.iter().find(|c| normalize_answer(c) == g) {
        return Some(c);
    }
    let padded = format!(" {g} ");
    let hits: Vec<&String> =
        classes.iter().filter(|c| !normalize_answer(c).is_empty() && padded.contains(&format!(" {} ", normalize_answer(c)))).collect();
    match hits.as_slice() {
        [only] => Some(only.as_str()),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub count: usize,
    pub scores: BTreeMap<String, f64>,
}

/// Open-vocabulary evaluation grouped by task. Tasks listed in `classes`
/// are scored as prompt classification through [`map_to_class`]; VQA by
/// accuracy; captioning by ROUGE-L and CIDEr; anything else by ROUGE-L.
pub fn zero_shot_eval(
    params: &Parameters,
    episodes: &[Episode],
    classes: &BTreeMap<TaskKind, Vec<String>>,
    ctx: &EvalContext<'_>,
) -> Result<BTreeMap<TaskKind, TaskReport>> {
    let open = EvalContext { decode: DecodeSettings { mode: DecodeMode::Open, ..ctx.decode }, ..*ctx };
    let mut by_task: BTreeMap<TaskKind, Vec<Episode>> = BTreeMap::new();
    for e in episodes {
        by_task.entry(e.task).or_default().push(e.clone());
    }
    let mut out = BTreeMap::new();
    for (task, eps) in by_task {
        let preds = predict(params, &eps, &open)?;
        let scores = if let Some(cls) = classes.get(&task) {
            let hits = preds
                .iter()
                .filter(|p| map_to_class(&p.generated, cls).is_some_and(|c| normalize_answer(c) == normalize_answer(&p.reference)))
                .count();
            BTreeMap::from([("accuracy".to_string(), hits as f64 / preds.len() as f64)])
        } else {
            let metrics: &[Metric] = match task {
                TaskKind::Vqa => &[Metric::Accuracy],
                TaskKind::Captioning | TaskKind::MultiCaptioning => &[Metric::RougeL, Metric::Cider],
                _ => &[Metric::RougeL],
            };
            score_predictions(&eps, preds, metrics)?.summary.means
        };
        out.insert(task, TaskReport { count: eps.len(), scores });
    }
    Ok(out)
}

/// Number of updates until the recorded batch loss first reaches `target`.
pub fn steps_to_target(losses: &[f64], target: f64) -> Option<usize> {
    losses.iter().position(|&l| l <= target).map(|i| i + 1)
}

/// Median where runs that never reached the target count as one step past
/// the run length.
pub fn median_steps(steps: &[Option<usize>], run_length: usize) -> f64 {
    let mut v: Vec<usize> = steps.iter().map(|s| s.unwrap_or(run_length + 1)).collect();
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferComparison {
    pub target_loss: f64,
    pub run_length: usize,
    pub seeds: Vec<u64>,
    pub scratch: Vec<Option<usize>>,
    pub continual: Vec<Option<usize>>,
    pub scratch_median: f64,
    pub continual_median: f64,
}

/// Fine-tunes once from scratch and once from `donor` per seed and compares
/// how many steps each needs to reach `target_loss`.
pub fn continual_vs_scratch(
    donor: &std::path::Path,
    plan: &TrainPlan,
    data: &[Dataset],
    config: &ModelConfig,
    target_loss: f64,
    seeds: &[u64],
) -> Result<TransferComparison> {
    let mut scratch = Vec::new();
    let mut continual = Vec::new();
    let mut run_length = 0;
    for &seed in seeds {
        let s = train(&TrainPlan { init: InitMode::Scratch, seed, ..plan.clone() }, data, config)?;
        let c = train(&TrainPlan { init: InitMode::FromCheckpoint(donor.to_path_buf()), seed, ..plan.clone() }, data, config)?;
        run_length = s.losses.len();
        scratch.push(steps_to_target(&s.losses, target_loss));
        continual.push(steps_to_target(&c.losses, target_loss));
    }
    Ok(TransferComparison {
        target_loss,
        run_length,
        seeds: seeds.to_vec(),
        scratch_median: median_steps(&scratch, run_length),
        continual_median: median_steps(&continual, run_length),
        scratch,
        continual,
    })
}
