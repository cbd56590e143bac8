//! Greedy, beam and answer-set-constrained decoding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_logits, encode_source, Parameters, SourceItem};
use crate::numerics::{log_softmax_rows, Tensor};
use crate::tokenization::{UnifiedVocabulary, BOS, EOS};

/// Next-token log-probabilities for a BOS-rooted prefix.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// Scores prefixes with a model; the source is encoded once.
pub struct ModelScorer<'p> {
    params: &'p Parameters,
    encoder_states: Tensor,
}

impl<'p> ModelScorer<'p> {
    pub fn new(params: &'p Parameters, source: &[SourceItem]) -> Result<Self> {
        Ok(ModelScorer { params, encoder_states: encode_source(params, source)? })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config().vocab.total() as usize
    }

    fn log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        let logits = decode_logits(self.params, &self.encoder_states, prefix)?;
        let (rows, _) = logits.dims2();
        let last = Tensor::matrix(1, logits.dims2().1, logits.row(rows - 1).to_vec())?;
        Ok(log_softmax_rows(&last)?.into_data())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Starts with BOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    /// Cumulative log-probability per generated token, EOS included.
    pub fn normalized_score(&self) -> f64 {
        if self.generated() == 0 {
            0.0
        } else {
            self.log_prob / self.generated() as f64
        }
    }
}

#[derive(Debug, Default, Clone)]
struct TrieNode {
    children: BTreeMap<u32, usize>,
}

/// Prefix tree over answer token sequences, each terminated by EOS.
#[derive(Debug, Clone)]
pub struct AnswerTrie {
    nodes: Vec<TrieNode>,
    depth: usize,
}

impl AnswerTrie {
    pub fn new(sequences: &[Vec<u32>]) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Validation("constrained decoding needs a nonempty answer set".into()));
        }
        let mut nodes = vec![TrieNode::default()];
        let mut depth = 0;
        for seq in sequences {
            if seq.contains(&EOS) {
                return Err(Error::Validation("answer tokens may not contain EOS".into()));
            }
            let mut at = 0;
            for &t in seq.iter().chain(std::iter::once(&EOS)) {
                at = match nodes[at].children.get(&t) {
                    Some(&next) => next,
                    None => {
                        nodes.push(TrieNode::default());
                        let id = nodes.len() - 1;
                        nodes[at].children.insert(t, id);
                        id
                    }
                };
            }
            depth = depth.max(seq.len() + 1);
        }
        Ok(AnswerTrie { nodes, depth })
    }

    pub fn from_answers<S: AsRef<str>>(answers: &[S], vocab: &UnifiedVocabulary) -> Result<Self> {
        let seqs: Vec<Vec<u32>> = answers.iter().map(|a| vocab.encode(a.as_ref())).collect();
        AnswerTrie::new(&seqs)
    }

    /// Longest path length, EOS included.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Ids allowed after `generated` (the tokens after BOS), ascending.
    pub fn allowed(&self, generated: &[u32]) -> Vec<u32> {
        let mut at = 0;
        for t in generated {
            match self.nodes[at].children.get(t) {
                Some(&next) => at = next,
                None => return Vec::new(),
            }
        }
        self.nodes[at].children.keys().copied().collect()
    }

    /// Every root-to-leaf path, each ending in EOS.
    pub fn paths(&self) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((at, path)) = stack.pop() {
            if self.nodes[at].children.is_empty() {
                out.push(path);
                continue;
            }
            for (&t, &next) in self.nodes[at].children.iter().rev() {
                let mut p = path.clone();
                p.push(t);
                stack.push((next, p));
            }
        }
        out
    }
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy(scorer: &dyn StepScorer, max_len: usize) -> Result<BeamHypothesis> {
    let mut hyp = BeamHypothesis { tokens: vec![BOS], log_prob: 0.0, finished: false };
    while hyp.generated() < max_len {
        let lp = scorer.log_probs(&hyp.tokens)?;
        let mut best = 0;
        for (i, v) in lp.iter().enumerate() {
            if *v > lp[best] {
                best = i;
            }
        }
        hyp.tokens.push(best as u32);
        hyp.log_prob += lp[best];
        if best as u32 == EOS {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Beam search. Each step keeps the `beam` best of (finished hypotheses
/// and all one-token extensions) by cumulative log-probability, ties to the
/// lower parent index and then the lower token id. The returned hypothesis
/// maximizes the length-normalized score. With a trie, only its allowed
/// continuations are expanded and the length limit is raised to the trie
/// depth so every result is a complete answer.
pub fn beam_search(
    scorer: &dyn StepScorer,
    beam: usize,
    max_len: usize,
    trie: Option<&AnswerTrie>,
) -> Result<BeamHypothesis> {
    if beam == 0 {
        return Err(Error::Validation("beam width must be at least 1".into()));
    }
    let max_len = match trie {
        Some(t) => max_len.max(t.depth()),
        None => max_len,
    };
    let mut hyps = vec![BeamHypothesis { tokens: vec![BOS], log_prob: 0.0, finished: false }];
    for _ in 0..max_len {
        if hyps.iter().all(|h| h.finished) {
            break;
        }
        // (score, parent, token); token None carries a finished hypothesis.
        let mut pool: Vec<(f64, usize, Option<u32>)> = Vec::new();
        for (i, h) in hyps.iter().enumerate() {
            if h.finished {
                pool.push((h.log_prob, i, None));
                continue;
            }
            let lp = scorer.log_probs(&h.tokens)?;
            match trie {
                Some(t) => {
                    for id in t.allowed(&h.tokens[1..]) {
                        pool.push((h.log_prob + lp[id as usize], i, Some(id)));
                    }
                }
                None => pool.extend(lp.iter().enumerate().map(|(id, v)| (h.log_prob + v, i, Some(id as u32)))),
            }
        }
        if pool.is_empty() {
            return Err(Error::Contract("beam search ran out of hypotheses".into()));
        }
        pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        pool.truncate(beam);
        hyps = pool
            .into_iter()
            .map(|(score, parent, tok)| {
                let mut h = hyps[parent].clone();
                if let Some(t) = tok {
                    h.tokens.push(t);
                    h.log_prob = score;
                    h.finished = t == EOS;
                }
                h
            })
            .collect();
    }
    let mut best = 0;
    for (i, h) in hyps.iter().enumerate() {
        if h.normalized_score() > hyps[best].normalized_score() {
            best = i;
        }
    }
    Ok(hyps.swap_remove(best))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Open,
    Constrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeSettings {
    pub beam: usize,
    pub max_len: usize,
    pub mode: DecodeMode,
}

impl Default for DecodeSettings {
    fn default() -> Self {
        DecodeSettings { beam: 1, max_len: 32, mode: DecodeMode::Open }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    /// Generated ids after BOS, EOS stripped.
    pub tokens: Vec<u32>,
    pub score: f64,
}

/// Decodes one source. Constrained mode requires `answer_set`.
pub fn generate(
    params: &Parameters,
    vocab: &UnifiedVocabulary,
    source: &[SourceItem],
    settings: &DecodeSettings,
    answer_set: Option<&[String]>,
) -> Result<Generation> {
    let scorer = ModelScorer::new(params, source)?;
    let max_len = settings.max_len.min(params.config().max_tgt - 1);
    let trie = match settings.mode {
        DecodeMode::Open => None,
        DecodeMode::Constrained => {
            let answers = answer_set
                .ok_or_else(|| Error::Validation("constrained decoding needs an answer set".into()))?;
            let trie = AnswerTrie::from_answers(answers, vocab)?;
            if trie.depth() > params.config().max_tgt - 1 {
                return Err(Error::Validation("an answer is longer than max_tgt allows".into()));
            }
            Some(trie)
        }
    };
    let hyp = beam_search(&scorer, settings.beam, max_len, trie.as_ref())?;
    Ok(finish(hyp, vocab))
}

/// Plain argmax decoding of one source, without the beam machinery.
pub fn generate_greedy(
    params: &Parameters,
    vocab: &UnifiedVocabulary,
    source: &[SourceItem],
    max_len: usize,
) -> Result<Generation> {
    let scorer = ModelScorer::new(params, source)?;
    let hyp = greedy(&scorer, max_len.min(params.config().max_tgt - 1))?;
    Ok(finish(hyp, vocab))
}

fn finish(hyp: BeamHypothesis, vocab: &UnifiedVocabulary) -> Generation {
    let score = hyp.normalized_score();
    let mut tokens = hyp.tokens[1..].to_vec();
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    Generation { text: vocab.render(&tokens), tokens, score }
}
