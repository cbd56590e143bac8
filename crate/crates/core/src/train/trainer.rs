//! The training loop.

use std::path::PathBuf;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{ModelConfig, Parameters};
use crate::numerics::{adam_step, AdamConfig, AdamState};
use crate::persist::{check_compatible, load_checkpoint, Checkpoint, Provenance, RngState};
use crate::task::RenderedPair;
use crate::train::loss::sharded_gradients;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Scratch,
    FromCheckpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub init: InitMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub workers: usize,
    #[serde(default)]
    pub exec: ExecMode,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            init: InitMode::Scratch,
            lr: 1e-3,
            batch_size: 8,
            epochs: 20,
            warmup_ratio: 0.06,
            label_smoothing: 0.1,
            seed: 0,
            workers: 1,
            exec: ExecMode::Parallel,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return fail(format!("warmup ratio {} outside [0, 1]", self.warmup_ratio));
        }
        if self.workers == 0 || self.batch_size < self.workers {
            return fail(format!("batch size {} below worker count {}", self.batch_size, self.workers));
        }
        if !self.batch_size.is_multiple_of(self.workers) {
            return fail(format!("batch size {} not divisible by {} workers", self.batch_size, self.workers));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail(format!("learning rate {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label smoothing {} outside [0, 1)", self.label_smoothing));
        }
        Ok(())
    }

    /// Hash of the plan's JSON. Execution mode is left out since it never
    /// changes results.
    pub fn digest(&self) -> String {
        let plan = TrainPlan { exec: ExecMode::default(), ..self.clone() };
        let json = serde_json::to_vec(&plan).expect("plan serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Linear warmup over `round(ratio · total)` steps to `lr`, then linear
/// decay reaching zero at step `total`.
pub fn learning_rate(lr: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).round() as usize;
    if step < warmup {
        lr * (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        lr * (total - step) as f64 / (total - warmup) as f64
    } else {
        lr
    }
}

/// One named source of pairs in a training mixture.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub pairs: Vec<RenderedPair>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    /// Which dataset each step drew from.
    pub sources: Vec<usize>,
}

pub fn total_steps(plan: &TrainPlan, data: &[Dataset]) -> usize {
    let n: usize = data.iter().map(|d| d.pairs.len()).sum();
    plan.epochs * n.div_ceil(plan.batch_size)
}

struct Cursor {
    order: Vec<usize>,
    at: usize,
}

impl Cursor {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.at == self.order.len() {
            self.order.shuffle(rng);
            self.at = 0;
        }
        self.at += 1;
        self.order[self.at - 1]
    }
}

fn initial_params(plan: &TrainPlan, config: &ModelConfig) -> Result<(Parameters, String)> {
    match &plan.init {
        InitMode::Scratch => Ok((Parameters::init(config, plan.seed)?, "scratch".into())),
        InitMode::FromCheckpoint(path) => {
            let ckpt = load_checkpoint(path)?;
            check_compatible(&ckpt, config)?;
            Ok((ckpt.params, format!("from_checkpoint:{}", path.display())))
        }
    }
}

/// Trains a model. Every step draws one dataset with probability
/// proportional to its size, takes the next `batch_size` examples of that
/// dataset's reshuffled-per-pass order, and applies one Adam update on the
/// data-parallel gradient. Continuing from a checkpoint reuses its weights
/// with fresh optimizer state.
pub fn train(plan: &TrainPlan, data: &[Dataset], config: &ModelConfig) -> Result<TrainOutcome> {
    plan.validate()?;
    let data: Vec<&Dataset> = data.iter().filter(|d| !d.pairs.is_empty()).collect();
    if data.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let (mut params, init) = initial_params(plan, config)?;
    let mut adam = AdamState::new(params.tensors(), AdamConfig { lr: plan.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let weights: Vec<usize> = data.iter().map(|d| d.pairs.len()).collect();
    let mixture = WeightedIndex::new(&weights).map_err(|e| Error::Data(e.to_string()))?;
    let mut cursors: Vec<Cursor> = data
        .iter()
        .map(|d| {
            let mut order: Vec<usize> = (0..d.pairs.len()).collect();
            order.shuffle(&mut rng);
            Cursor { order, at: 0 }
        })
        .collect();
    let owned: Vec<Dataset> = data.iter().map(|d| (*d).clone()).collect();
    let total = total_steps(plan, &owned);
    let mut losses = Vec::with_capacity(total);
    let mut sources = Vec::with_capacity(total);
    for step in 0..total {
        let which = if data.len() == 1 { 0 } else { mixture.sample(&mut rng) };
        let batch: Vec<RenderedPair> =
            (0..plan.batch_size).map(|_| data[which].pairs[cursors[which].next(&mut rng)].clone()).collect();
        let dropout_seed: u64 = rng.random();
        let (loss, grads) =
            sharded_gradients(&params, &batch, plan.workers, plan.label_smoothing, dropout_seed, plan.exec)?;
        adam.config.lr = learning_rate(plan.lr, step, total, plan.warmup_ratio);
        adam_step(params.tensors_mut(), &grads, &mut adam)?;
        losses.push(loss);
        sources.push(which);
    }
    let checkpoint = Checkpoint {
        params,
        adam,
        rng: RngState::capture(&rng),
        step: total as u64,
        provenance: Provenance { init, plan_digest: plan.digest() },
    };
    Ok(TrainOutcome { checkpoint, losses, sources })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let lr = |s| learning_rate(1.0, s, 10, 0.2);
        assert_eq!(lr(0), 0.5);
        assert_eq!(lr(1), 1.0);
        assert_eq!(lr(2), 1.0);
        assert_eq!(lr(9), 1.0 / 8.0);
        assert_eq!(learning_rate(1.0, 0, 4, 0.0), 1.0);
        assert_eq!(learning_rate(1.0, 3, 4, 1.0), 1.0);
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan::default().validate().is_ok());
        let bad = [
            TrainPlan { warmup_ratio: 1.5, ..TrainPlan::default() },
            TrainPlan { workers: 16, ..TrainPlan::default() },
            TrainPlan { workers: 3, ..TrainPlan::default() },
            TrainPlan { epochs: 0, ..TrainPlan::default() },
        ];
        for p in bad {
            assert!(matches!(p.validate(), Err(Error::Config(_))));
        }
    }
}
