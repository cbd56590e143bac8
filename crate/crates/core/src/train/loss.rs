//! Per-example losses and the batch gradient contracts.

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{Net, Parameters};
use crate::numerics::Tensor;
use crate::task::RenderedPair;
use crate::tokenization::PAD;

fn split_target(target: &[u32]) -> Result<(&[u32], &[u32])> {
    if target.len() < 2 {
        return Err(Error::Contract("target needs at least BOS and one more token".into()));
    }
    Ok((&target[..target.len() - 1], &target[1..]))
}

/// Token-mean label-smoothed cross-entropy of one pair, PAD ignored.
pub fn example_loss(params: &Parameters, pair: &RenderedPair, smoothing: f64) -> Result<f64> {
    let mut net = Net::new(params);
    let loss = build_loss(&mut net, pair, smoothing)?;
    Ok(net.graph.value(loss).data()[0])
}

fn build_loss(net: &mut Net<'_>, pair: &RenderedPair, smoothing: f64) -> Result<crate::numerics::NodeId> {
    let (prefix, gold) = split_target(&pair.target)?;
    let enc = net.encode_source(&pair.source)?;
    let logits = net.decode_logits(enc, prefix)?;
    net.graph.smoothed_cross_entropy(logits, gold, smoothing, Some(PAD))
}

/// Loss and parameter gradients of one pair. `dropout_seed` only matters
/// when the config has a nonzero dropout rate.
pub fn example_gradients(
    params: &Parameters,
    pair: &RenderedPair,
    smoothing: f64,
    dropout_seed: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let mut net = Net::with_dropout(params, dropout_seed);
    let loss = build_loss(&mut net, pair, smoothing)?;
    let value = net.graph.value(loss).data()[0];
    net.graph.backward(loss)?;
    Ok((value, net.take_param_grads()))
}

fn accumulate(total: &mut [Tensor], grads: &[Tensor]) {
    for (t, g) in total.iter_mut().zip(grads) {
        t.add_assign(g);
    }
}

fn scale_all(grads: &mut [Tensor], c: f64) {
    for g in grads {
        for v in g.data_mut() {
            *v *= c;
        }
    }
}

/// Mean loss over the batch (each example's token-mean loss weighted
/// equally) and its gradient. Examples run through `exec`; the sum is taken
/// in batch order.
pub fn batch_gradients(
    params: &Parameters,
    batch: &[RenderedPair],
    smoothing: f64,
    dropout_seed: u64,
    exec: ExecMode,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let results = exec.map_range(batch.len(), |i| {
        example_gradients(params, &batch[i], smoothing, dropout_seed.wrapping_add(i as u64))
    });
    let mut total: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        accumulate(&mut total, &g);
    }
    let n = batch.len() as f64;
    scale_all(&mut total, 1.0 / n);
    Ok((loss / n, total))
}

/// Splits the batch into `workers` contiguous equal shards, computes each
/// shard's mean-loss gradient independently against the shared read-only
/// parameters, and averages the shard results in ascending worker order.
pub fn data_parallel_gradients(
    params: &Parameters,
    batch: &[RenderedPair],
    workers: usize,
    smoothing: f64,
    exec: ExecMode,
) -> Result<(f64, Vec<Tensor>)> {
    sharded_gradients(params, batch, workers, smoothing, 0, exec)
}

/// [`data_parallel_gradients`] with dropout masks seeded from
/// `dropout_seed` plus each example's batch index.
pub(crate) fn sharded_gradients(
    params: &Parameters,
    batch: &[RenderedPair],
    workers: usize,
    smoothing: f64,
    dropout_seed: u64,
    exec: ExecMode,
) -> Result<(f64, Vec<Tensor>)> {
    if workers == 0 || batch.is_empty() || !batch.len().is_multiple_of(workers) {
        return Err(Error::Contract(format!(
            "batch of {} cannot be split evenly across {workers} workers",
            batch.len()
        )));
    }
    let shard = batch.len() / workers;
    let shards = exec.map_range(workers, |w| {
        let part = &batch[w * shard..(w + 1) * shard];
        batch_gradients(params, part, smoothing, dropout_seed.wrapping_add((w * shard) as u64), exec)
    });
    let mut total: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss = 0.0;
    for r in shards {
        let (l, g) = r?;
        loss += l;
        accumulate(&mut total, &g);
    }
    scale_all(&mut total, 1.0 / workers as f64);
    Ok((loss / workers as f64, total))
}
