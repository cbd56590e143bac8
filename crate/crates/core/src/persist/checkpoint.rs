//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "UMMC" u32:version u32:len config-json
//! u32:count  tensor-record*          parameters, config order
//! u64:adam-step f64:lr f64:beta1 f64:beta2 f64:eps
//! u32:count  tensor-record*          "m.<name>" then "v.<name>"
//! tensor-record                      "rng", dtype 2: seed[32] stream[8] word_pos[16]
//! u64:training-step
//! u32:len provenance-json
//!
//! tensor-record = u32:name-len name u8:rank u64:dim* u8:dtype data
//! ```

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parameters};
use crate::numerics::{AdamConfig, AdamState, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UMMC";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_BYTES: u8 = 2;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    fn to_bytes(self) -> Vec<u8> {
        let mut out = self.seed.to_vec();
        out.extend(self.stream.to_le_bytes());
        out.extend(self.word_pos.to_le_bytes());
        out
    }

    fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() != 56 {
            return Err(Error::Parse(format!("rng record of {} bytes", b.len())));
        }
        Ok(RngState {
            seed: b[..32].try_into().unwrap(),
            stream: u64::from_le_bytes(b[32..40].try_into().unwrap()),
            word_pos: u128::from_le_bytes(b[40..56].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// `scratch` or `from_checkpoint:<path>`.
    pub init: String,
    /// SHA-256 of the training plan JSON.
    pub plan_digest: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Parameters,
    pub adam: AdamState,
    pub rng: RngState,
    pub step: u64,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(CHECKPOINT_MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        put_blob(&mut out, &serde_json::to_vec(self.config())?);
        out.extend((self.params.names().len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_tensor(&mut out, name, t);
        }
        let a = &self.adam;
        out.extend(a.step.to_le_bytes());
        for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
            out.extend(v.to_le_bytes());
        }
        out.extend((2 * a.m.len() as u32).to_le_bytes());
        for (prefix, moments) in [("m", &a.m), ("v", &a.v)] {
            for (name, t) in self.params.names().iter().zip(moments) {
                put_tensor(&mut out, &format!("{prefix}.{name}"), t);
            }
        }
        let rng = self.rng.to_bytes();
        put_record_header(&mut out, "rng", &[rng.len() as u64], DTYPE_BYTES);
        out.extend(rng);
        out.extend(self.step.to_le_bytes());
        put_blob(&mut out, &serde_json::to_vec(&self.provenance)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic.to_vec() });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let config: ModelConfig = serde_json::from_slice(r.blob("config")?)?;
        config.validate()?;
        let shapes = config.param_shapes();
        let read_section = |r: &mut Reader, expected: &[(String, Vec<usize>)], what| -> Result<Vec<Tensor>> {
            let count = r.u32(what)? as usize;
            if count != expected.len() {
                return Err(Error::Compatibility {
                    tensor: expected.get(count.min(expected.len().saturating_sub(1))).map_or("?".into(), |e| e.0.clone()),
                    detail: format!("file holds {count} tensors, config implies {}", expected.len()),
                });
            }
            expected
                .iter()
                .map(|(name, shape)| {
                    let (found, dims, dtype) = r.record_header(what)?;
                    if found != *name || dims != *shape || dtype != DTYPE_F64 {
                        return Err(Error::Compatibility {
                            tensor: name.clone(),
                            detail: format!("file has `{found}` {dims:?} dtype {dtype}, config implies {shape:?}"),
                        });
                    }
                    let n: usize = shape.iter().product();
                    let data = r.take(8 * n, what)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::new(shape.clone(), data)
                })
                .collect()
        };
        let tensors = read_section(&mut r, &shapes, "parameters")?;
        let params = Parameters::from_tensors(&config, tensors)?;
        let step = r.u64("optimizer")?;
        let mut h = [0.0; 4];
        for v in &mut h {
            *v = f64::from_le_bytes(r.take(8, "optimizer")?.try_into().unwrap());
        }
        let moment_shapes: Vec<(String, Vec<usize>)> = ["m", "v"]
            .iter()
            .flat_map(|p| shapes.iter().map(move |(n, s)| (format!("{p}.{n}"), s.clone())))
            .collect();
        let mut moments = read_section(&mut r, &moment_shapes, "optimizer")?;
        let v = moments.split_off(shapes.len());
        let adam = AdamState {
            step,
            m: moments,
            v,
            config: AdamConfig { lr: h[0], beta1: h[1], beta2: h[2], eps: h[3] },
        };
        let (name, dims, dtype) = r.record_header("rng")?;
        if name != "rng" || dtype != DTYPE_BYTES || dims.len() != 1 {
            return Err(Error::Parse("malformed rng record".into()));
        }
        let rng = RngState::from_bytes(r.take(dims[0], "rng")?)?;
        let train_step = r.u64("step")?;
        let provenance = serde_json::from_slice(r.blob("provenance")?)?;
        if r.at != bytes.len() {
            return Err(Error::Parse(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(Checkpoint { params, adam, rng, step: train_step, provenance })
    }
}

/// Checks that a checkpoint can seed a model with `config`, naming the
/// first tensor whose presence or shape differs.
pub fn check_compatible(checkpoint: &Checkpoint, config: &ModelConfig) -> Result<()> {
    let have = checkpoint.config().param_shapes();
    let want = config.param_shapes();
    for (i, (name, shape)) in want.iter().enumerate() {
        match have.get(i) {
            Some((n, s)) if n == name && s == shape => {}
            Some((n, s)) if n == name => {
                return Err(Error::Compatibility {
                    tensor: name.clone(),
                    detail: format!("checkpoint shape {s:?}, config shape {shape:?}"),
                })
            }
            _ => {
                return Err(Error::Compatibility { tensor: name.clone(), detail: "missing from checkpoint".into() })
            }
        }
    }
    if let Some((name, _)) = have.get(want.len()) {
        return Err(Error::Compatibility { tensor: name.clone(), detail: "not in the model config".into() });
    }
    if checkpoint.config() != config {
        return Err(Error::Compatibility {
            tensor: "config".into(),
            detail: "shapes agree but hyperparameters differ".into(),
        });
    }
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend((bytes.len() as u32).to_le_bytes());
    out.extend(bytes);
}

fn put_record_header(out: &mut Vec<u8>, name: &str, dims: &[u64], dtype: u8) {
    put_blob(out, name.as_bytes());
    out.push(dims.len() as u8);
    for d in dims {
        out.extend(d.to_le_bytes());
    }
    out.push(dtype);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    let dims: Vec<u64> = t.shape().iter().map(|&d| d as u64).collect();
    put_record_header(out, name, &dims, DTYPE_F64);
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated(what))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn blob(&mut self, what: &'static str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }

    fn record_header(&mut self, what: &'static str) -> Result<(String, Vec<usize>, u8)> {
        let name = String::from_utf8(self.blob(what)?.to_vec())
            .map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?;
        let rank = self.take(1, what)?[0] as usize;
        let dims = (0..rank).map(|_| self.u64(what).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let dtype = self.take(1, what)?[0];
        Ok((name, dims, dtype))
    }
}

/// Writes to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    // Temporary files are created owner-only; give the result ordinary permissions.
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(std::fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
