//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any fails. Name fragments given as arguments
//! restrict the run to matching criteria.

mod fixtures;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniseq_core::model::{decode_logits, encode_source, param_count, ModelConfig, Parameters, SourceItem, PRESETS};
use uniseq_core::numerics::gradcheck::{central_differences, relative_error, DEFAULT_FLOOR, DEFAULT_STEP};
use uniseq_core::numerics::{Graph, NodeId, Tensor, GATHER_ZERO};
use uniseq_core::persist::{load_checkpoint, save_checkpoint};
use uniseq_core::task::{serialize, template_text, Limits, RenderedPair, TaskKind};
use uniseq_core::tokenization::{assemble, train_bpe, BpeModel, TokenKind, VocabSizes, BOS, EOS, PAD};
use uniseq_core::train::{
    batch_gradients, beam_search, cider, continual_vs_scratch, data_parallel_gradients, evaluate, example_gradients,
    example_loss, generate, greedy, lcs_len, rouge_l_tokens, train, truncation_ablation, Dataset, DecodeMode,
    DecodeSettings, EvalContext, Metric, ModelScorer, TrainPlan, CIDER_MAX_N, CIDER_SCALE, ROUGE_BETA,
};
use uniseq_core::ExecMode;

use fixtures::*;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 1 --------------------------------------------------------------------

fn vocabulary_arithmetic() -> Verdict {
    // 5 specials + 256 bytes + 50,004 merges of distinct byte pairs.
    let merges: Vec<(u32, u32)> = (0..50_004u32).map(|i| (5 + i / 256, 5 + i % 256)).collect();
    let bpe = BpeModel::with_merges(&merges).map_err(|e| e.to_string())?;
    let vocab = assemble(bpe, 1000, 8192).map_err(|e| e.to_string())?;
    let s = vocab.sizes();
    let expected = 50_265 + 1_000 + 8_192;
    let bounds = vocab.classify(50_264).ok() == Some(TokenKind::Text)
        && vocab.classify(50_265).ok() == Some(TokenKind::Location)
        && vocab.classify(51_265).ok() == Some(TokenKind::Vision)
        && vocab.classify(59_456).ok() == Some(TokenKind::Vision)
        && vocab.classify(59_457).is_err();
    check(
        s.text == 50_265 && vocab.total() == expected && expected == 59_457 && bounds,
        format!("T={} L={} V={} total={} (range boundaries ok: {bounds})", s.text, s.locations, s.vision, vocab.total()),
    )
}

// 2 --------------------------------------------------------------------

/// A seeded random computation graph over every differentiable op. The
/// structure depends only on the seed; `overrides` replaces the drawn
/// leaf contents so the same graph can be re-evaluated at shifted inputs.
struct RandomGraph<'a> {
    rng: ChaCha8Rng,
    overrides: Option<&'a [Tensor]>,
    leaves: Vec<NodeId>,
    values: Vec<Tensor>,
}

impl RandomGraph<'_> {
    fn leaf(&mut self, g: &mut Graph<'_>, shape: &[usize]) -> NodeId {
        let n: usize = shape.iter().product();
        let drawn: Vec<f64> = (0..n).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        let t = match self.overrides {
            Some(o) => o[self.leaves.len()].clone(),
            None => Tensor::new(shape.to_vec(), drawn).unwrap(),
        };
        let id = g.input(t.clone());
        self.leaves.push(id);
        self.values.push(t);
        id
    }
}

fn row_spread(t: &Tensor) -> f64 {
    let (r, _) = t.dims2();
    (0..r)
        .map(|i| {
            let row = t.row(i);
            let m = row.iter().sum::<f64>() / row.len() as f64;
            row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / row.len() as f64
        })
        .fold(f64::INFINITY, f64::min)
}

fn build_random_graph<'a>(seed: u64, overrides: Option<&'a [Tensor]>) -> (Graph<'static>, RandomGraph<'a>, NodeId) {
    let mut g = Graph::new();
    let mut b = RandomGraph { rng: ChaCha8Rng::seed_from_u64(seed), overrides, leaves: Vec::new(), values: Vec::new() };
    let r = b.rng.random_range(2..=4);
    let c = b.rng.random_range(2..=5);
    let mut pool: Vec<NodeId> = (0..3).map(|_| b.leaf(&mut g, &[r, c])).collect();
    let steps = b.rng.random_range(4..=10);
    for _ in 0..steps {
        let a = *pool.choose(&mut b.rng).unwrap();
        let a2 = *pool.choose(&mut b.rng).unwrap();
        let op = b.rng.random_range(0..14);
        let next = match op {
            0 => g.add(a, a2),
            1 => g.mul(a, a2),
            2 => {
                let k = b.rng.random_range(-2.0..2.0);
                g.scale(a, k)
            }
            3 => g.gelu(a),
            4 => {
                let w = b.leaf(&mut g, &[c, c]);
                g.matmul(a, w)
            }
            5 | 6 => {
                // Attention-shaped: softmax(a a2ᵀ) a.
                let s = g.matmul_nt(a, a2).unwrap();
                let p = if op == 5 { g.softmax_rows(s) } else { g.causal_softmax_rows(s) }.unwrap();
                g.matmul(p, a)
            }
            7 => {
                if row_spread(g.value(a)) > 1e-2 {
                    g.layer_norm(a)
                } else {
                    g.gelu(a)
                }
            }
            8 => {
                let row = b.leaf(&mut g, &[c]);
                if b.rng.random_bool(0.5) { g.add_row(a, row) } else { g.mul_row(a, row) }
            }
            9 => {
                let rows: Vec<usize> = (0..r).map(|_| b.rng.random_range(0..r)).collect();
                g.gather_rows(a, &rows)
            }
            10 => {
                let k = b.rng.random_range(1..c);
                let left = g.slice_cols(a, 0, k).unwrap();
                let right = g.slice_cols(a2, k, c - k).unwrap();
                if b.rng.random_bool(0.5) {
                    g.concat_cols(&[left, right])
                } else {
                    let top: Vec<usize> = (0..r / 2).collect();
                    let bottom: Vec<usize> = (r / 2..r).collect();
                    let t = g.gather_rows(a, &top).unwrap();
                    let u = g.gather_rows(a2, &bottom).unwrap();
                    g.concat_rows(&[t, u])
                }
            }
            11 => {
                // (c × r) view multiplied back to (r × c).
                let flat = g.reshape(a, vec![c, r]).unwrap();
                let sq = g.matmul(a2, flat).unwrap();
                g.matmul(sq, a)
            }
            12 => {
                // Arbitrary flat gather, at most one zero per row.
                let mut index = Vec::with_capacity(r * c);
                for _ in 0..r {
                    let zero_at = if b.rng.random_bool(0.5) { Some(b.rng.random_range(0..c)) } else { None };
                    for j in 0..c {
                        index.push(if Some(j) == zero_at { GATHER_ZERO } else { b.rng.random_range(0..r * c) });
                    }
                }
                g.gather(a, index, vec![r, c])
            }
            _ => {
                let mut keep: Vec<bool> = (0..r * c).map(|_| b.rng.random_bool(0.7)).collect();
                for i in 0..r {
                    keep[i * c] = true;
                }
                g.dropout(a, &keep, 0.3)
            }
        }
        .unwrap();
        pool.push(next);
    }
    let last = *pool.last().unwrap();
    let other = *pool.choose(&mut b.rng).unwrap();
    let mixed = g.add(last, other).unwrap();
    let loss = match b.rng.random_range(0..3) {
        0 => {
            let proj = b.leaf(&mut g, &[r, c]);
            let m = g.mul(mixed, proj).unwrap();
            g.sum(m).unwrap()
        }
        1 => {
            let sq = g.mul(mixed, mixed).unwrap();
            g.mean(sq).unwrap()
        }
        _ => {
            let targets: Vec<u32> = (0..r).map(|_| b.rng.random_range(0..c as u32)).collect();
            let ignore = if b.rng.random_bool(0.5) { Some(targets[0]) } else { None };
            let ignore = ignore.filter(|i| targets.iter().any(|t| t != i));
            g.smoothed_cross_entropy(mixed, &targets, 0.1, ignore).unwrap()
        }
    };
    (g, b, loss)
}

fn random_graph_error(seed: u64) -> f64 {
    let (mut g, built, loss) = build_random_graph(seed, None);
    g.backward(loss).unwrap();
    let values = built.values.clone();
    let mut worst: f64 = 0.0;
    for (k, &leaf) in built.leaves.iter().enumerate() {
        let analytic = g.grad(leaf);
        let numeric = central_differences(values[k].data(), DEFAULT_STEP, |x| {
            let mut shifted = values.clone();
            shifted[k].data_mut().copy_from_slice(x);
            let (g2, _, l2) = build_random_graph(seed, Some(&shifted));
            g2.value(l2).data()[0]
        });
        for (a, n) in analytic.data().iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n, DEFAULT_FLOOR));
        }
    }
    worst
}

fn transformer_gradient_error() -> f64 {
    let cfg = micro_config(VocabSizes { text: 261, locations: 2, vision: 2 });
    let mut params = Parameters::init(&cfg, 3).unwrap();
    // Non-trivial biases and norm gains so every path carries gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let names = params.names().to_vec();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let is_gain = name.ends_with(".g");
        let is_bias = name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2");
        if is_gain || is_bias {
            for v in t.data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
    }
    let pair = RenderedPair {
        source: vec![
            SourceItem::Text(70),
            SourceItem::Patch { pixels: vec![0.3, -0.2, 0.9, -0.7], raster: 0, masked: false },
            SourceItem::Patch { pixels: vec![-0.5, 0.1, 0.4, 0.8], raster: 1, masked: false },
            SourceItem::Patch { pixels: vec![], raster: 2, masked: true },
            SourceItem::Text(261),
        ],
        target: vec![BOS, 80, 90, PAD, 262, EOS],
        image_spans: vec![],
        field_tokens: vec![],
    };
    let (_, grads) = example_gradients(&params, &pair, 0.1, 0).unwrap();
    let mut worst: f64 = 0.0;
    for (ti, grad) in grads.iter().enumerate() {
        let x = params.tensors()[ti].data().to_vec();
        let mut probe = params.clone();
        let numeric = central_differences(&x, DEFAULT_STEP, |v| {
            probe.tensors_mut()[ti].data_mut().copy_from_slice(v);
            example_loss(&probe, &pair, 0.1).unwrap()
        });
        for (a, n) in grad.data().iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n, DEFAULT_FLOOR));
        }
    }
    worst
}

fn gradient_suite() -> Verdict {
    let graphs = ExecMode::Parallel.map_range(200, |s| random_graph_error(s as u64));
    let graph_worst = graphs.iter().copied().fold(0.0, f64::max);
    let model_worst = transformer_gradient_error();
    check(
        graph_worst < 1e-6 && model_worst < 1e-6,
        format!("200 random graphs max rel err {graph_worst:.2e}; tiny transformer {model_worst:.2e} (bound 1e-6)"),
    )
}

// 3 --------------------------------------------------------------------

fn random_string(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(0..40);
    (0..len)
        .map(|_| match rng.random_range(0..5) {
            0 => rng.random_range(' '..='~'),
            1 => *[' ', '\n', '\t', ' '].choose(rng).unwrap(),
            2 => rng.random_range('\u{a0}'..='\u{2ff}'),
            3 => rng.random_range('\u{4e00}'..='\u{4fff}'),
            _ => rng.random::<char>(),
        })
        .collect()
}

fn bpe_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let training: Vec<String> = (0..300).map(|_| random_string(&mut rng)).collect();
    let bpe = train_bpe(&training, 300);
    let mut failures = 0;
    for _ in 0..10_000 {
        let s = random_string(&mut rng);
        if bpe.decode(&bpe.encode(&s)).ok().as_deref() != Some(s.as_str()) {
            failures += 1;
        }
    }
    check(failures == 0, format!("10000 strings, {failures} failures, {} merges", bpe.merges().len()))
}

// 4 --------------------------------------------------------------------

/// Longest common subsequence by trying every subsequence of `a`.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_subseq = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
        if sub.len() > best && is_subseq(&sub) {
            best = sub.len();
        }
    }
    best
}

fn all_sequences(max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for sym in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(sym);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn rouge_oracle(cand: &[u8], reference: &[u8]) -> (f64, f64, f64) {
    let l = brute_lcs(cand, reference) as f64;
    if cand.is_empty() || reference.is_empty() || l == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let p = l / cand.len() as f64;
    let r = l / reference.len() as f64;
    let f = (1.0 + ROUGE_BETA.powi(2)) * r * p / (r + ROUGE_BETA.powi(2) * p);
    (p, r, f)
}

/// Plain CIDEr written out directly: per n, TF-IDF vectors over the
/// n-grams, cosine per reference, mean over references, mean over n, ×10.
fn cider_oracle(cands: &[Vec<&str>], refs: &[Vec<Vec<&str>>]) -> Vec<f64> {
    let n_items = cands.len() as f64;
    let grams = |toks: &[&str], n: usize| -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        if toks.len() >= n {
            for i in 0..=toks.len() - n {
                *m.entry(toks[i..i + n].join(" ")).or_insert(0.0) += 1.0;
            }
        }
        m
    };
    let mut scores = vec![0.0; cands.len()];
    for n in 1..=CIDER_MAX_N {
        let mut df: HashMap<String, usize> = HashMap::new();
        for item in refs {
            let mut seen = HashSet::new();
            for r in item {
                for g in grams(r, n).into_keys() {
                    seen.insert(g);
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let weigh = |m: BTreeMap<String, f64>| -> BTreeMap<String, f64> {
            m.into_iter()
                .map(|(g, c)| {
                    let d = df.get(&g).copied().unwrap_or(0).max(1) as f64;
                    (g, c * (n_items / d).ln())
                })
                .collect()
        };
        for i in 0..cands.len() {
            let cv = weigh(grams(&cands[i], n));
            let mut total = 0.0;
            for r in &refs[i] {
                let rv = weigh(grams(r, n));
                let dot: f64 = cv.iter().map(|(g, x)| x * rv.get(g).unwrap_or(&0.0)).sum();
                let nc = cv.values().map(|x| x * x).sum::<f64>().sqrt();
                let nr = rv.values().map(|x| x * x).sum::<f64>().sqrt();
                total += if nc > 0.0 && nr > 0.0 { dot / (nc * nr) } else { 0.0 };
            }
            scores[i] += total / refs[i].len() as f64;
        }
    }
    scores.iter().map(|s| s / CIDER_MAX_N as f64 * CIDER_SCALE).collect()
}

fn metric_oracles() -> Verdict {
    let seqs = all_sequences(6);
    let rows = ExecMode::Parallel.map(&seqs, |a| {
        let mut worst: f64 = 0.0;
        let mut lcs_mismatch = 0usize;
        for b in &seqs {
            if lcs_len(a, b) != brute_lcs(a, b) {
                lcs_mismatch += 1;
            }
            let got = rouge_l_tokens(a, b);
            let (p, r, f) = rouge_oracle(a, b);
            worst = worst.max((got.precision - p).abs()).max((got.recall - r).abs()).max((got.f - f).abs());
        }
        (worst, lcs_mismatch)
    });
    let rouge_worst = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let lcs_bad: usize = rows.iter().map(|r| r.1).sum();

    let words = ["a", "cat", "dog", "sat", "on", "the", "mat", "red", "big"];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cider_worst: f64 = 0.0;
    for _ in 0..20 {
        let items = rng.random_range(2..8);
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<&str> {
            let len = rng.random_range(1..9);
            (0..len).map(|_| *words.choose(rng).unwrap()).collect()
        };
        let cands: Vec<Vec<&str>> = (0..items).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<Vec<Vec<&str>>> =
            (0..items).map(|_| (0..rng.random_range(1..4)).map(|_| sentence(&mut rng)).collect()).collect();
        let got = cider(
            &cands.iter().map(|c| c.join(" ")).collect::<Vec<_>>(),
            &refs.iter().map(|rs| rs.iter().map(|r| r.join(" ")).collect()).collect::<Vec<_>>(),
        )
        .map_err(|e| e.to_string())?;
        let want = cider_oracle(&cands, &refs);
        for (g, w) in got.per_item.iter().zip(&want) {
            cider_worst = cider_worst.max((g - w).abs());
        }
        let mean = want.iter().sum::<f64>() / want.len() as f64;
        cider_worst = cider_worst.max((got.mean - mean).abs());
    }
    let pairs = seqs.len() * seqs.len();
    check(
        lcs_bad == 0 && rouge_worst <= 1e-12 && cider_worst <= 1e-9,
        format!(
            "ROUGE-L over {pairs} pairs: {lcs_bad} LCS mismatches, max diff {rouge_worst:.1e}; CIDEr 20 corpora max diff {cider_worst:.1e}"
        ),
    )
}

// 5 --------------------------------------------------------------------

/// Random micro model with weights scaled up so output distributions are
/// sharp and decisions are not near-ties.
fn sharp_model(vocab: VocabSizes, seed: u64, max_tgt: usize) -> Parameters {
    let cfg = ModelConfig { max_tgt, ..micro_config(vocab) };
    let mut p = Parameters::init(&cfg, seed).unwrap();
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v *= 20.0;
        }
    }
    p
}

/// Between 1 and `max_len - 1` items, about a third of them patches.
fn random_source(rng: &mut ChaCha8Rng, text: u32, max_len: usize) -> Vec<SourceItem> {
    let len = rng.random_range(1..max_len);
    (0..len)
        .map(|i| {
            if rng.random_bool(0.3) {
                SourceItem::Patch { pixels: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(), raster: i, masked: false }
            } else {
                SourceItem::Text(rng.random_range(5..text))
            }
        })
        .collect()
}

fn decoding() -> Verdict {
    let words = ["yes", "no", "maybe", "normal", "north", "nodule", "mass", "massive", "effusion", "edema", "clear"];
    let mut corpus: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    corpus.push(words.join(" "));
    let vocab = assemble(train_bpe(&corpus, 12), 4, 4).unwrap();
    let sizes = vocab.sizes();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut identical = 0;
    for seed in 0..50u64 {
        let params = sharp_model(sizes, seed, 10);
        let source = random_source(&mut rng, sizes.text, 10);
        let scorer = ModelScorer::new(&params, &source).map_err(|e| e.to_string())?;
        let g = greedy(&scorer, 9).map_err(|e| e.to_string())?;
        let b = beam_search(&scorer, 1, 9, None).map_err(|e| e.to_string())?;
        if g.tokens == b.tokens {
            identical += 1;
        }
    }

    let mut members = 0;
    for trial in 0..100u64 {
        let answers: Vec<String> = if trial == 0 {
            vec!["yes".into(), "no".into(), "maybe".into()]
        } else {
            let k = rng.random_range(1..=5);
            let mut pool = words.to_vec();
            pool.shuffle(&mut rng);
            pool[..k].iter().map(|w| w.to_string()).collect()
        };
        let params = sharp_model(sizes, 100 + trial, 10);
        let source = random_source(&mut rng, sizes.text, 10);
        let settings =
            DecodeSettings { beam: rng.random_range(1..=4), max_len: rng.random_range(1..6), mode: DecodeMode::Constrained };
        let out = generate(&params, &vocab, &source, &settings, Some(&answers)).map_err(|e| e.to_string())?;
        if answers.iter().any(|a| vocab.encode(a) == out.tokens && *a == out.text) {
            members += 1;
        }
    }
    check(
        identical == 50 && members == 100,
        format!("beam 1 = greedy on {identical}/50 models; constrained output in answer set {members}/100"),
    )
}

// 6 --------------------------------------------------------------------

fn causality() -> Verdict {
    let sizes = VocabSizes { text: 270, locations: 4, vision: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut held = 0;
    for trial in 0..50u64 {
        let params = sharp_model(sizes, 200 + trial, 12);
        let source = random_source(&mut rng, sizes.text, 10);
        let enc = encode_source(&params, &source).map_err(|e| e.to_string())?;
        let len = rng.random_range(3..=12);
        let mut prefix: Vec<u32> = vec![BOS];
        prefix.extend((1..len).map(|_| rng.random_range(5..sizes.total())));
        let t = rng.random_range(0..len - 1);
        let mut changed = prefix.clone();
        for tok in &mut changed[t + 1..] {
            *tok = rng.random_range(5..sizes.total());
        }
        let a = decode_logits(&params, &enc, &prefix).map_err(|e| e.to_string())?;
        let b = decode_logits(&params, &enc, &changed).map_err(|e| e.to_string())?;
        let same = (0..=t).all(|i| a.row(i).iter().zip(b.row(i)).all(|(x, y)| x.to_bits() == y.to_bits()));
        if same {
            held += 1;
        }
    }
    check(held == 50, format!("earlier logit rows bitwise unchanged in {held}/50 trials"))
}

// 7 --------------------------------------------------------------------

fn random_pair(rng: &mut ChaCha8Rng, sizes: VocabSizes, max_tgt: usize) -> RenderedPair {
    let source = random_source(rng, sizes.text, 12);
    let len = rng.random_range(2..max_tgt);
    let mut target = vec![BOS];
    target.extend((1..len - 1).map(|_| rng.random_range(5..sizes.total())));
    target.push(EOS);
    RenderedPair { source, target, image_spans: vec![], field_tokens: vec![] }
}

fn data_parallel() -> Verdict {
    let sizes = VocabSizes { text: 270, locations: 4, vision: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ModelConfig { max_tgt: 10, ..micro_config(sizes) };
    let params = Parameters::init(&cfg, 9).unwrap();
    let batch: Vec<RenderedPair> = (0..8).map(|_| random_pair(&mut rng, sizes, 10)).collect();
    let (full_loss, full) = batch_gradients(&params, &batch, 0.1, 0, ExecMode::Parallel).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for k in [1, 2, 4] {
        let (loss, grads) =
            data_parallel_gradients(&params, &batch, k, 0.1, ExecMode::Parallel).map_err(|e| e.to_string())?;
        worst = worst.max(relative_error(loss, full_loss, 1e-300));
        for (g, f) in grads.iter().zip(&full) {
            let scale = f.max_abs().max(1e-300);
            for (a, b) in g.data().iter().zip(f.data()) {
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    check(worst <= 1e-9, format!("k in {{1,2,4}} vs full batch of 8: max relative deviation {worst:.1e} (bound 1e-9)"))
}

// 8 --------------------------------------------------------------------

fn overfit() -> Verdict {
    let episodes = texture_episodes();
    let vocab = assemble(train_bpe(&texture_corpus(), 60), 16, 16).unwrap();
    let mut cfg = ModelConfig::preset("tiny", vocab.sizes(), 8, 1).unwrap();
    cfg.max_tgt = 24;
    let limits = Limits::for_model(&cfg);
    let pairs: Vec<RenderedPair> =
        episodes.iter().map(|e| serialize(e, &vocab, &limits, 0)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let plan = TrainPlan {
        lr: 3e-3,
        batch_size: 8,
        epochs: 125,
        warmup_ratio: 0.05,
        label_smoothing: 0.0,
        seed: 1,
        ..TrainPlan::default()
    };
    let out = train(&plan, &[Dataset { name: "captions".into(), pairs }], &cfg).map_err(|e| e.to_string())?;
    let ctx = EvalContext {
        vocab: &vocab,
        limits: &limits,
        decode: DecodeSettings { beam: 1, max_len: 23, mode: DecodeMode::Open },
        seed: 0,
        exec: ExecMode::Parallel,
    };
    let report = evaluate(&out.checkpoint.params, &episodes, &[Metric::Accuracy], &ctx).map_err(|e| e.to_string())?;
    let acc = report.score(Metric::Accuracy).unwrap_or(0.0);
    check(
        out.losses.len() <= 500 && acc == 1.0,
        format!(
            "tiny preset (2+2 layers, d_model 64), {} steps, final loss {:.4}, exact match {}/{}",
            out.losses.len(),
            out.losses.last().unwrap(),
            (acc * episodes.len() as f64).round(),
            episodes.len()
        ),
    )
}

// 9 --------------------------------------------------------------------

fn truncation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train_eps: Vec<_> = (0..64).map(|i| needle_episode(&mut rng, i % 2 == 0)).collect();
    let test: Vec<_> = (0..40).map(|i| needle_episode(&mut rng, i % 2 == 0)).collect();
    let mut corpus: Vec<String> = train_eps.iter().map(|e| e.text["Context"].clone()).collect();
    corpus.push(template_text(TaskKind::QaContext).to_string());
    corpus.extend(["yes", "no", "is it cancer"].map(String::from));
    let vocab = assemble(train_bpe(&corpus, 150), 16, 16).unwrap();
    let mut cfg = ModelConfig::preset("tiny", vocab.sizes(), 8, 1).unwrap();
    cfg.max_tgt = 8;
    let limits = Limits::for_model(&cfg);

    // Every answer-bearing word sits past the 50th context token.
    let first_needle = test
        .iter()
        .map(|e| {
            let ids = vocab.encode(&e.text["Context"]);
            let prefix_of = |n: usize| vocab.render(&ids[..n]);
            (1..=ids.len())
                .find(|&n| prefix_of(n).contains(NEEDLE_YES) || prefix_of(n).contains(NEEDLE_NO))
                .unwrap_or(usize::MAX)
        })
        .min()
        .unwrap();

    let pairs: Vec<RenderedPair> =
        train_eps.iter().map(|e| serialize(e, &vocab, &limits, 0)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let plan = TrainPlan {
        lr: 3e-3,
        batch_size: 16,
        epochs: 40,
        warmup_ratio: 0.05,
        label_smoothing: 0.0,
        seed: 1,
        ..TrainPlan::default()
    };
    let out = train(&plan, &[Dataset { name: "needle".into(), pairs }], &cfg).map_err(|e| e.to_string())?;
    let ctx = EvalContext {
        vocab: &vocab,
        limits: &limits,
        decode: DecodeSettings { beam: 1, max_len: 4, mode: DecodeMode::Constrained },
        seed: 0,
        exec: ExecMode::Parallel,
    };
    let r = truncation_ablation(&out.checkpoint.params, &test, 50, Metric::Accuracy, &ctx).map_err(|e| e.to_string())?;
    // Balanced labels with answer set {yes, no}: the class prior is one half.
    let chance = test.iter().filter(|e| e.target == "yes").count().max(test.iter().filter(|e| e.target == "no").count())
        as f64
        / test.len() as f64;
    check(
        first_needle > 50 && r.full >= 0.95 && r.truncated <= chance,
        format!(
            "answer first at context token {first_needle}; full {:.3}, truncated to 50 tokens {:.3}, chance {chance:.3}, delta {:.3}",
            r.full, r.truncated, r.delta
        ),
    )
}

// 10 -------------------------------------------------------------------

fn transfer() -> Verdict {
    let vocab = assemble(train_bpe(&texture_corpus(), 60), 16, 16).unwrap();
    let mut cfg = ModelConfig::preset("tiny", vocab.sizes(), 8, 1).unwrap();
    cfg.max_tgt = 24;
    let limits = Limits::for_model(&cfg);
    let to_pairs = |eps: &[uniseq_core::task::Episode]| -> Result<Vec<RenderedPair>, String> {
        eps.iter().map(|e| serialize(e, &vocab, &limits, 0).map_err(|e| e.to_string())).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let donor_data = to_pairs(&jittered_texture_episodes(&mut rng, 128))?;
    let target_data = to_pairs(&jittered_texture_episodes(&mut rng, 64))?;
    let donor_plan = TrainPlan {
        lr: 3e-3,
        batch_size: 8,
        epochs: 25,
        warmup_ratio: 0.05,
        label_smoothing: 0.0,
        seed: 99,
        ..TrainPlan::default()
    };
    let donor = train(&donor_plan, &[Dataset { name: "donor".into(), pairs: donor_data }], &cfg)
        .map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let donor_path = dir.path().join("donor.ckpt");
    save_checkpoint(&donor_path, &donor.checkpoint).map_err(|e| e.to_string())?;
    let plan = TrainPlan { epochs: 15, ..donor_plan };
    let target_loss = 0.5;
    let cmp = continual_vs_scratch(
        &donor_path,
        &plan,
        &[Dataset { name: "target".into(), pairs: target_data }],
        &cfg,
        target_loss,
        &[1, 2, 3, 4, 5],
    )
    .map_err(|e| e.to_string())?;
    let show = |v: &[Option<usize>]| v.iter().map(|s| s.map_or("-".into(), |n| n.to_string())).collect::<Vec<_>>().join(",");
    check(
        cmp.continual_median < cmp.scratch_median,
        format!(
            "steps to loss {target_loss} over {} steps: continual [{}] median {}, scratch [{}] median {}",
            cmp.run_length,
            show(&cmp.continual),
            cmp.continual_median,
            show(&cmp.scratch),
            cmp.scratch_median
        ),
    )
}

// 11 -------------------------------------------------------------------

fn dir_snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

/// Artifact bytes by file name, and each step's stdout.
type PipelineOutput = (BTreeMap<String, Vec<u8>>, Vec<Vec<u8>>);

fn run_pipeline(dir: &Path) -> Result<PipelineOutput, String> {
    write_pipeline_inputs(dir);
    let mut stdout = Vec::new();
    for args in PIPELINE {
        let out = uniseq(dir, args);
        if !out.status.success() {
            return Err(format!("`uniseq {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
        }
        stdout.push(out.stdout);
    }
    Ok((dir_snapshot(dir), stdout))
}

fn persistence() -> Verdict {
    let sizes = VocabSizes { text: 270, locations: 4, vision: 4 };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ModelConfig { max_tgt: 10, ..micro_config(sizes) };
    let data: Vec<RenderedPair> = (0..16).map(|_| random_pair(&mut rng, sizes, 10)).collect();
    let plan = TrainPlan { batch_size: 4, epochs: 2, seed: 3, ..TrainPlan::default() };
    let out = train(&plan, &[Dataset { name: "d".into(), pairs: data.clone() }], &cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&path, &out.checkpoint).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let bitwise = back.params.tensors().iter().zip(out.checkpoint.params.tensors()).all(|(a, b)| {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    }) && back == out.checkpoint
        && std::fs::read(&path).map_err(|e| e.to_string())? == back.to_bytes().map_err(|e| e.to_string())?;
    let batch = &data[..4];
    let before = batch_gradients(&out.checkpoint.params, batch, 0.1, 0, ExecMode::Sequential).map_err(|e| e.to_string())?;
    let after = batch_gradients(&back.params, batch, 0.1, 0, ExecMode::Sequential).map_err(|e| e.to_string())?;
    let same_loss = before.0.to_bits() == after.0.to_bits();

    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let (files_a, out_a) = run_pipeline(a.path())?;
    let (files_b, out_b) = run_pipeline(b.path())?;
    let differing: Vec<&String> = files_a.keys().filter(|k| files_a.get(*k) != files_b.get(*k)).collect();
    let reproducible = differing.is_empty() && files_a.len() == files_b.len() && out_a == out_b;
    check(
        bitwise && same_loss && reproducible,
        format!(
            "round trip bitwise {bitwise}, next-step loss identical {same_loss}; {} subcommands over {} artifacts byte-identical across two runs: {reproducible}{}",
            PIPELINE.len(),
            files_a.len(),
            if differing.is_empty() { String::new() } else { format!(" (differ: {differing:?})") }
        ),
    )
}

// 12 -------------------------------------------------------------------

fn scaling() -> Verdict {
    let sizes = VocabSizes { text: 50_265, locations: 1000, vision: 8192 };
    let mut counts = Vec::new();
    let mut all_match = true;
    for name in PRESETS {
        let c = ModelConfig::preset(name, sizes, 8, 3).map_err(|e| e.to_string())?;
        let closed = param_count(&c);
        let enumerated: usize = c.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        all_match &= closed == enumerated;
        counts.push((name, closed, enumerated));
    }
    let ordered = counts.windows(2).all(|w| w[0].1 < w[1].1);
    check(
        ordered && all_match,
        counts.iter().map(|(n, c, e)| format!("{n} {c} (enumerated {e})")).collect::<Vec<_>>().join(" < "),
    )
}

// ----------------------------------------------------------------------

type Criterion = (&'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 12] = [
    ("vocabulary arithmetic", vocabulary_arithmetic),
    ("gradient suite", gradient_suite),
    ("bpe round trip", bpe_round_trip),
    ("metric oracles", metric_oracles),
    ("decoding", decoding),
    ("causality", causality),
    ("data-parallel contract", data_parallel),
    ("end-to-end overfit", overfit),
    ("truncation ablation", truncation),
    ("continual vs scratch", transfer),
    ("persistence", persistence),
    ("scaling sanity", scaling),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
