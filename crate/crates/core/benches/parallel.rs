//! Sequential vs parallel execution of the data-parallel hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniseq_core::model::{ModelConfig, Parameters, SourceItem};
use uniseq_core::task::RenderedPair;
use uniseq_core::tokenization::{VocabSizes, BOS, EOS};
use uniseq_core::train::batch_gradients;
use uniseq_core::vision::train_codebook;
use uniseq_core::ExecMode;

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn bench_config() -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 2,
        d_model: 32,
        heads: 4,
        d_ffn: 64,
        max_src: 32,
        max_tgt: 12,
        dropout: 0.1,
        vocab: VocabSizes { text: 300, locations: 16, vision: 32 },
        patch_size: 2,
        channels: 1,
        embed_hidden: 4,
    }
}

fn random_pair(rng: &mut ChaCha8Rng) -> RenderedPair {
    let mut source: Vec<SourceItem> = (0..4)
        .map(|raster| SourceItem::Patch { pixels: (0..4).map(|_| rng.random()).collect(), raster, masked: false })
        .collect();
    source.extend((0..20).map(|_| SourceItem::Text(rng.random_range(5..300))));
    let mut target = vec![BOS];
    target.extend((0..8).map(|_| rng.random_range(5..300)));
    target.push(EOS);
    RenderedPair { source, target, image_spans: std::iter::once(0..4).collect(), field_tokens: vec![20] }
}

fn gradients(c: &mut Criterion) {
    let params = Parameters::init(&bench_config(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<RenderedPair> = (0..8).map(|_| random_pair(&mut rng)).collect();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&params, &batch, 0.1, 3, exec).unwrap())
        });
    }
    group.finish();
}

fn codebook(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vectors: Vec<Vec<f64>> = (0..4000).map(|_| (0..48).map(|_| rng.random()).collect()).collect();
    let mut group = c.benchmark_group("train_codebook");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_codebook(&vectors, 64, 5, 9, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, gradients, codebook);
criterion_main!(benches);
