//! 8-bit binary PGM (P5) / PPM (P6) images.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `height × width × channels`, each value normalized to
/// `(v/max − 0.5) / 0.5`, i.e. into `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Builds a normalized image from raw 8-bit samples (max value 255).
    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image from {} bytes",
                bytes.len()
            )));
        }
        Ok(Image { height, width, channels, data: bytes.iter().map(|&b| normalize(b, 255)).collect() })
    }
}

fn normalize(v: u8, max: u32) -> f64 {
    (v as f64 / max as f64 - 0.5) / 0.5
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse(format!("malformed header: bad {what}")))
    }
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Parse("malformed header: expected P5 or P6 magic".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let max = cur.number("max value")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse("malformed header: zero dimension".into()));
    }
    if max == 0 || max > 255 {
        return Err(Error::Parse(format!("unsupported max value {max} (8-bit only)")));
    }
    match bytes.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Parse("malformed header: missing separator".into())),
    }
    let n = width * height * channels;
    let pixels = bytes
        .get(cur.pos..cur.pos + n)
        .ok_or_else(|| Error::Parse(format!("truncated pixel data: need {n} bytes")))?;
    if pixels.iter().any(|&p| p as u32 > max) {
        return Err(Error::Parse(format!("sample exceeds max value {max}")));
    }
    Ok(Image { height, width, channels, data: pixels.iter().map(|&p| normalize(p, max)).collect() })
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pnm(&bytes).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Binary PGM/PPM bytes for raw 8-bit samples.
pub fn encode_pnm(width: usize, height: usize, channels: usize, samples: &[u8]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::Validation(format!("{channels} channels"))),
    };
    if samples.len() != width * height * channels {
        return Err(Error::Shape("sample count".into()));
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    Ok(out)
}
