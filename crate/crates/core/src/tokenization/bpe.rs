use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const MASK: u32 = 3;
pub const SEP: u32 = 4;
pub const NUM_SPECIALS: u32 = 5;
/// Id of byte `b` is `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: u32 = NUM_SPECIALS;
/// Specials plus the 256 single-byte tokens.
pub const BASE_TOKENS: u32 = NUM_SPECIALS + 256;

/// Byte-level BPE: 256 byte tokens, then one token per merge in priority
/// order. Ids are dense: specials, bytes, merges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
    lookup: HashMap<Vec<u8>, u32>,
}

/// Splits text into pre-tokens: a run of whitespace followed by a run of
/// non-whitespace. Concatenating the pieces gives back the input.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws && i > start {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl BpeModel {
    /// A model with no merges: specials and raw bytes only.
    pub fn bytes_only() -> Self {
        let mut tokens = vec![Vec::new(); NUM_SPECIALS as usize];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        let lookup = (0..=255u8).map(|b| (vec![b], BYTE_OFFSET + b as u32)).collect();
        BpeModel { merges: Vec::new(), tokens, ranks: HashMap::new(), lookup }
    }

    fn from_merges(merges: &[(u32, u32)]) -> Result<Self> {
        let mut model = BpeModel::bytes_only();
        for &(l, r) in merges {
            model.push_merge(l, r)?;
        }
        Ok(model)
    }

    fn push_merge(&mut self, left: u32, right: u32) -> Result<u32> {
        let n = self.tokens.len() as u32;
        if left < BYTE_OFFSET || right < BYTE_OFFSET || left >= n || right >= n {
            return Err(Error::Parse(format!("merge ({left}, {right}) refers to unknown tokens")));
        }
        let bytes = [self.tokens[left as usize].as_slice(), &self.tokens[right as usize]].concat();
        if self.lookup.contains_key(&bytes) {
            return Err(Error::Parse(format!("merge produces duplicate token {bytes:?}")));
        }
        self.lookup.insert(bytes.clone(), n);
        self.ranks.insert((left, right), n);
        self.merges.push((left, right));
        self.tokens.push(bytes);
        Ok(n)
    }

    /// Number of text-range ids, specials included.
    pub fn num_tokens(&self) -> u32 {
        self.tokens.len() as u32
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    pub fn token_id(&self, bytes: &[u8]) -> Option<u32> {
        self.lookup.get(bytes).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pre_tokenize(text) {
            out.extend(self.encode_piece(piece.as_bytes()));
        }
        out
    }

    fn encode_piece(&self, bytes: &[u8]) -> Vec<u32> {
        let mut ids: Vec<u32> = bytes.iter().map(|&b| BYTE_OFFSET + b as u32).collect();
        loop {
            // Lowest merged id == highest priority merge.
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&m| (m, (w[0], w[1]))))
                .min();
            let Some((merged, pair)) = best else { break };
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        ids
    }

    /// Concatenated bytes of the tokens. EOS and SEP decode to nothing;
    /// PAD, BOS, MASK and ids past the text range are errors.
    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            match id {
                PAD | BOS | MASK => {
                    return Err(Error::Range { id, detail: "special token is not decodable".into() })
                }
                EOS | SEP => {}
                _ => match self.tokens.get(id as usize) {
                    Some(b) => out.extend_from_slice(b),
                    None => {
                        return Err(Error::Range {
                            id,
                            detail: format!("text range has {} ids", self.tokens.len()),
                        })
                    }
                },
            }
        }
        Ok(out)
    }

    /// Decodes to text; invalid UTF-8 (only possible for hand-built id
    /// sequences) is replaced with U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Line-oriented text form: `bpe v1 <n>` then one merge per line as two
    /// hex-encoded byte strings.
    pub fn to_text(&self) -> String {
        let mut s = format!("bpe v1 {}\n", self.merges.len());
        for &(l, r) in &self.merges {
            let _ = writeln!(
                s,
                "{} {}",
                hex::encode(&self.tokens[l as usize]),
                hex::encode(&self.tokens[r as usize])
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty BPE file".into()))?;
        let count = parse_bpe_header(header)?;
        let mut model = BpeModel::bytes_only();
        for i in 0..count {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("expected {count} merges, found {i}")))?;
            let mut parts = line.split(' ');
            let (Some(l), Some(r), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse(format!("merge line {}: `{line}`", i + 2)));
            };
            let decode = |h: &str| {
                hex::decode(h).map_err(|e| Error::Parse(format!("merge line {}: {e}", i + 2)))
            };
            let (lb, rb) = (decode(l)?, decode(r)?);
            let find = |b: &[u8]| {
                model
                    .token_id(b)
                    .ok_or_else(|| Error::Parse(format!("merge line {}: unknown token {b:?}", i + 2)))
            };
            let (li, ri) = (find(&lb)?, find(&rb)?);
            model.push_merge(li, ri)?;
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(Error::Parse("trailing content after merges".into()));
        }
        Ok(model)
    }
}

fn parse_bpe_header(line: &str) -> Result<usize> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        ["bpe", "v1", n] => n.parse().map_err(|_| Error::Parse(format!("bad merge count `{n}`"))),
        _ => Err(Error::Parse(format!("bad BPE header `{line}`"))),
    }
}

/// Greedy BPE training over whitespace pre-tokens: repeatedly merge the
/// most frequent adjacent pair, breaking ties by the lexicographically
/// smallest (left bytes, right bytes). Pairs whose merge would duplicate an
/// existing token are skipped. Stops early when no pair remains.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> BpeModel {
    let mut counts: BTreeMap<&[u8], usize> = BTreeMap::new();
    for text in corpus {
        for piece in pre_tokenize(text.as_ref()) {
            *counts.entry(piece.as_bytes()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<u32>, usize)> = counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| BYTE_OFFSET + b as u32).collect(), c))
        .collect();

    let mut model = BpeModel::bytes_only();
    for _ in 0..num_merges {
        let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
        for (ids, c) in &words {
            for w in ids.windows(2) {
                *pairs.entry((w[0], w[1])).or_default() += c;
            }
        }
        let key = |p: &(u32, u32)| (&model.tokens[p.0 as usize], &model.tokens[p.1 as usize]);
        let best = pairs
            .iter()
            .filter(|(p, _)| {
                let merged = [key(p).0.as_slice(), key(p).1].concat();
                !model.lookup.contains_key(&merged)
            })
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| key(pb).cmp(&key(pa))))
            .map(|(p, _)| *p);
        let Some(pair) = best else { break };
        let merged = model.push_merge(pair.0, pair.1).expect("valid merge");
        for (ids, _) in &mut words {
            let mut i = 0;
            let mut next = Vec::with_capacity(ids.len());
            while i < ids.len() {
                if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            *ids = next;
        }
    }
    model
}

impl BpeModel {
    /// Rebuilds a model from merges given as id pairs.
    pub fn with_merges(merges: &[(u32, u32)]) -> Result<Self> {
        BpeModel::from_merges(merges)
    }
}
