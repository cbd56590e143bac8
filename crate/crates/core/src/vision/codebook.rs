//! Frozen k-means codebook over raw patch vectors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::tokenization::VocabSizes;

/// `K` centroids of dimension `D`, row-major. Codebooks only come out of
/// [`train_codebook`] or a file, and both are frozen: nothing mutates the
/// centroids afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
}

pub const CODEBOOK_MAGIC: [u8; 4] = *b"UVQC";
pub const CODEBOOK_VERSION: u32 = 1;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn from_centroids(k: usize, dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if k == 0 || dim == 0 || centroids.len() != k * dim {
            return Err(Error::Shape(format!("{k}x{dim} codebook from {} values", centroids.len())));
        }
        if !centroids.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFault { op: "codebook" });
        }
        Ok(Codebook { k, dim, centroids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_frozen(&self) -> bool {
        true
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    /// Nearest centroid by squared distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.k {
            let d = sq_dist(v, self.centroid(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.centroids.len() * 8);
        out.extend_from_slice(&CODEBOOK_MAGIC);
        out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.centroids {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != CODEBOOK_MAGIC {
            return Err(Error::BadMagic {
                expected: CODEBOOK_MAGIC,
                found: bytes[..bytes.len().min(4)].to_vec(),
            });
        }
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or(Error::Truncated("codebook header"))
        };
        let version = word(4)?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Version { found: version, expected: CODEBOOK_VERSION });
        }
        let (k, dim) = (word(8)? as usize, word(12)? as usize);
        let body = &bytes[16..];
        if body.len() < k * dim * 8 {
            return Err(Error::Truncated("codebook centroids"));
        }
        if body.len() > k * dim * 8 {
            return Err(Error::Parse("trailing bytes after codebook".into()));
        }
        let centroids =
            body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Codebook::from_centroids(k, dim, centroids).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Codebook::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Mean squared distance to the assigned centroid, measured after each
    /// assignment step (first entry: right after initialization).
    pub distortion: Vec<f64>,
}

fn assign(vectors: &[Vec<f64>], centroids: &Codebook, exec: ExecMode) -> Vec<(usize, f64)> {
    exec.map(vectors, |v| centroids.nearest(v))
}

/// Lloyd's k-means with k-means++ seeding. Empty clusters are reseeded to
/// the points farthest from their current centroid.
pub fn train_codebook(
    vectors: &[Vec<f64>],
    k: usize,
    iterations: usize,
    seed: u64,
    exec: ExecMode,
) -> Result<KMeansFit> {
    let Some(first) = vectors.first() else {
        return Err(Error::Data("no input vectors for codebook training".into()));
    };
    if k == 0 {
        return Err(Error::Validation("codebook size must be at least 1".into()));
    }
    let dim = first.len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("codebook inputs must share one positive dimension".into()));
    }
    let n = vectors.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++: first center uniform, then proportional to squared distance.
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(&vectors[rng.random_range(0..n)]);
    let mut nearest: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            // Rounding can walk past the end; fall back to the last positive weight.
            if nearest[chosen] == 0.0 {
                chosen = nearest.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            }
            chosen
        } else {
            0
        };
        let c = vectors[pick].clone();
        for (d, v) in nearest.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, &c));
        }
        centroids.extend_from_slice(&c);
    }

    let mut book = Codebook { k, dim, centroids };
    let mut assignment = assign(vectors, &book, exec);
    let mut distortion = vec![mean_distortion(&assignment)];
    for _ in 0..iterations {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (v, &(j, _)) in vectors.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(v) {
                *s += x;
            }
        }
        let mut empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
        for j in 0..k {
            if counts[j] > 0 {
                for s in &mut sums[j * dim..(j + 1) * dim] {
                    *s /= counts[j] as f64;
                }
            }
        }
        if !empty.is_empty() {
            let mut far: Vec<usize> = (0..n).collect();
            far.sort_by(|&a, &b| assignment[b].1.total_cmp(&assignment[a].1).then(a.cmp(&b)));
            for (j, &p) in empty.drain(..).zip(&far) {
                sums[j * dim..(j + 1) * dim].copy_from_slice(&vectors[p]);
            }
        }
        let changed = sums != book.centroids;
        book.centroids = sums;
        assignment = assign(vectors, &book, exec);
        distortion.push(mean_distortion(&assignment));
        if !changed {
            break;
        }
    }
    Ok(KMeansFit { codebook: book, distortion })
}

fn mean_distortion(assignment: &[(usize, f64)]) -> f64 {
    assignment.iter().map(|a| a.1).sum::<f64>() / assignment.len() as f64
}

/// Vision-token ids for patch vectors: `T + L + nearest centroid`.
pub fn quantize(patches: &[&[f64]], codebook: &Codebook, vocab: &VocabSizes) -> Result<Vec<u32>> {
    if codebook.k() as u64 > vocab.vision as u64 {
        return Err(Error::Shape(format!(
            "codebook has {} codes but the vocabulary only {} vision ids",
            codebook.k(),
            vocab.vision
        )));
    }
    patches
        .iter()
        .map(|p| {
            if p.len() != codebook.dim() {
                return Err(Error::Shape(format!(
                    "patch of length {} against codebook dim {}",
                    p.len(),
                    codebook.dim()
                )));
            }
            vocab.vision_id(codebook.nearest(p).0 as u32)
        })
        .collect()
}
