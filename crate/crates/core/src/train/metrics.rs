//! Text-generation metrics.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SCALE: f64 = 10.0;

/// Lowercased alphanumeric runs.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

pub fn rouge_l_tokens<T: PartialEq>(cand: &[T], reference: &[T]) -> RougeL {
    let zero = RougeL { precision: 0.0, recall: 0.0, f: 0.0 };
    if cand.is_empty() || reference.is_empty() {
        return zero;
    }
    let lcs = lcs_len(cand, reference) as f64;
    if lcs == 0.0 {
        return zero;
    }
    let p = lcs / cand.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    RougeL { precision: p, recall: r, f: (1.0 + b2) * p * r / (r + b2 * p) }
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeL {
    rouge_l_tokens(&metric_tokens(candidate), &metric_tokens(reference))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderScores {
    pub per_item: Vec<f64>,
    pub mean: f64,
}

type Counts = HashMap<Vec<String>, f64>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts {
    let mut out = Counts::new();
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_default() += 1.0;
    }
    out
}

fn tfidf(counts: &Counts, idf: &dyn Fn(&[String]) -> f64) -> Counts {
    counts.iter().map(|(g, c)| (g.clone(), c * idf(g))).collect()
}

fn cosine(a: &Counts, b: &Counts) -> f64 {
    let norm = |v: &Counts| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

/// Corpus CIDEr: per n, candidate and reference n-gram counts are weighted
/// by `ln(items / items whose references contain the n-gram)`, compared by
/// cosine, averaged over references, then over n = 1..4, and scaled by 10.
/// An n-gram absent from every reference gets document frequency 1.
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<CiderScores> {
    if candidates.is_empty() {
        return Err(Error::Data("CIDEr over an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates against {} reference lists",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Data("every item needs at least one reference".into()));
    }
    let items = candidates.len() as f64;
    let cand_tokens: Vec<Vec<String>> = candidates.iter().map(|c| metric_tokens(c)).collect();
    let ref_tokens: Vec<Vec<Vec<String>>> =
        references.iter().map(|rs| rs.iter().map(|r| metric_tokens(r)).collect()).collect();
    let mut per_item = vec![0.0; candidates.len()];
    for n in 1..=CIDER_MAX_N {
        let ref_counts: Vec<Vec<Counts>> =
            ref_tokens.iter().map(|rs| rs.iter().map(|r| ngram_counts(r, n)).collect()).collect();
        let mut df: HashMap<Vec<String>, f64> = HashMap::new();
        for rs in &ref_counts {
            let seen: HashSet<&Vec<String>> = rs.iter().flat_map(|c| c.keys()).collect();
            for g in seen {
                *df.entry(g.clone()).or_default() += 1.0;
            }
        }
        let idf = |g: &[String]| (items / df.get(g).copied().unwrap_or(0.0).max(1.0)).ln();
        for (i, score) in per_item.iter_mut().enumerate() {
            let c = tfidf(&ngram_counts(&cand_tokens[i], n), &idf);
            let sims: f64 = ref_counts[i].iter().map(|r| cosine(&c, &tfidf(r, &idf))).sum();
            *score += sims / ref_counts[i].len() as f64;
        }
    }
    for s in &mut per_item {
        *s *= CIDER_SCALE / CIDER_MAX_N as f64;
    }
    let mean = per_item.iter().sum::<f64>() / items;
    Ok(CiderScores { per_item, mean })
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let kept: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn accuracy<S: AsRef<str>, G: AsRef<str>>(predictions: &[S], golds: &[G]) -> Result<f64> {
    if predictions.len() != golds.len() || predictions.is_empty() {
        return Err(Error::Contract(format!(
            "accuracy over {} predictions and {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_answer(p.as_ref()) == normalize_answer(g.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}
