use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenization::bpe::BpeModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Location,
    Vision,
}

/// One id space: text `[0, T)`, location `[T, T+L)`, vision `[T+L, T+L+V)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnifiedVocabulary {
    bpe: BpeModel,
    locations: u32,
    vision: u32,
}

/// Counts only; used where the BPE model itself is not needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VocabSizes {
    pub text: u32,
    pub locations: u32,
    pub vision: u32,
}

impl VocabSizes {
    pub fn total(&self) -> u32 {
        self.text + self.locations + self.vision
    }

    pub fn classify(&self, id: u32) -> Result<TokenKind> {
        if id < self.text {
            Ok(TokenKind::Text)
        } else if id < self.text + self.locations {
            Ok(TokenKind::Location)
        } else if id < self.total() {
            Ok(TokenKind::Vision)
        } else {
            Err(Error::Range { id, detail: format!("vocabulary has {} ids", self.total()) })
        }
    }

    pub fn location_id(&self, bin: u32) -> Result<u32> {
        if bin >= self.locations {
            return Err(Error::Range { id: bin, detail: format!("{} location bins", self.locations) });
        }
        Ok(self.text + bin)
    }

    pub fn location_bin(&self, id: u32) -> Result<u32> {
        match self.classify(id)? {
            TokenKind::Location => Ok(id - self.text),
            _ => Err(Error::Range { id, detail: "not a location token".into() }),
        }
    }

    pub fn vision_id(&self, code: u32) -> Result<u32> {
        if code >= self.vision {
            return Err(Error::Range { id: code, detail: format!("{} vision codes", self.vision) });
        }
        Ok(self.text + self.locations + code)
    }

    pub fn vision_code(&self, id: u32) -> Result<u32> {
        match self.classify(id)? {
            TokenKind::Vision => Ok(id - self.text - self.locations),
            _ => Err(Error::Range { id, detail: "not a vision token".into() }),
        }
    }
}

/// Builds the unified vocabulary around a trained BPE model.
pub fn assemble(bpe: BpeModel, locations: u32, vision: u32) -> Result<UnifiedVocabulary> {
    if locations == 0 || vision == 0 {
        return Err(Error::Validation("location and vision counts must be at least 1".into()));
    }
    Ok(UnifiedVocabulary { bpe, locations, vision })
}

impl UnifiedVocabulary {
    pub fn bpe(&self) -> &BpeModel {
        &self.bpe
    }

    pub fn sizes(&self) -> VocabSizes {
        VocabSizes { text: self.bpe.num_tokens(), locations: self.locations, vision: self.vision }
    }

    pub fn total(&self) -> u32 {
        self.sizes().total()
    }

    pub fn classify(&self, id: u32) -> Result<TokenKind> {
        self.sizes().classify(id)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.bpe.encode(text)
    }

    /// Human-readable rendering of any id sequence: text tokens decode as
    /// text, location and vision tokens as `<loc_k>` / `<img_k>`. Specials
    /// are dropped.
    pub fn render(&self, ids: &[u32]) -> String {
        let sizes = self.sizes();
        let mut out = String::new();
        let mut run: Vec<u8> = Vec::new();
        let flush = |run: &mut Vec<u8>, out: &mut String| {
            out.push_str(&String::from_utf8_lossy(run));
            run.clear();
        };
        for &id in ids {
            match sizes.classify(id) {
                Ok(TokenKind::Text) => {
                    if id >= crate::tokenization::bpe::NUM_SPECIALS {
                        run.extend_from_slice(self.bpe.token_bytes(id).unwrap_or_default());
                    }
                }
                Ok(TokenKind::Location) => {
                    flush(&mut run, &mut out);
                    out.push_str(&format!("<loc_{}>", id - sizes.text));
                }
                Ok(TokenKind::Vision) => {
                    flush(&mut run, &mut out);
                    out.push_str(&format!("<img_{}>", id - sizes.text - sizes.locations));
                }
                Err(_) => {}
            }
        }
        flush(&mut run, &mut out);
        out
    }

    /// `uvocab v1 T L V`, then the BPE model inline.
    pub fn to_text(&self) -> String {
        let s = self.sizes();
        format!("uvocab v1 {} {} {}\n{}", s.text, s.locations, s.vision, self.bpe.to_text())
    }

    /// Parses a vocabulary file. The BPE section is either inline or a
    /// single `path <file>` line, resolved relative to `base_dir`.
    pub fn from_text(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let (header, rest) = text.split_once('\n').unwrap_or((text, ""));
        let parts: Vec<&str> = header.split_whitespace().collect();
        let ["uvocab", "v1", t, l, v] = parts.as_slice() else {
            return Err(Error::Parse(format!("bad vocabulary header `{header}`")));
        };
        let num = |s: &str| s.parse::<u32>().map_err(|_| Error::Parse(format!("bad count `{s}`")));
        let (t, l, v) = (num(t)?, num(l)?, num(v)?);
        let bpe = if let Some(path) = rest.trim().strip_prefix("path ") {
            let p = base_dir.map_or_else(|| Path::new(path).to_path_buf(), |d| d.join(path));
            let body = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            BpeModel::from_text(&body)?
        } else {
            BpeModel::from_text(rest)?
        };
        if bpe.num_tokens() != t {
            return Err(Error::Parse(format!(
                "header declares {t} text tokens but the BPE model has {}",
                bpe.num_tokens()
            )));
        }
        assemble(bpe, l, v).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        UnifiedVocabulary::from_text(&text, path.parent())
    }
}
