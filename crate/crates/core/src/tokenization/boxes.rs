//! Bounding boxes as four location tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenization::vocab::VocabSizes;

/// Pixel-space box inside a `width × height` image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, width: f64, height: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2, width, height };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let BBox { x1, y1, x2, y2, width, height } = *self;
        let ok = [x1, y1, x2, y2, width, height].iter().all(|v| v.is_finite())
            && 0.0 <= x1
            && x1 < x2
            && x2 <= width
            && 0.0 <= y1
            && y1 < y2
            && y2 <= height;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "box ({x1}, {y1}, {x2}, {y2}) invalid for a {width}x{height} image"
            )))
        }
    }
}

/// `clamp(floor(coord / extent · bins), 0, bins − 1)`.
pub fn coord_bin(coord: f64, extent: f64, bins: u32) -> u32 {
    // coord·bins/extent is exact for integer pixel coordinates, unlike
    // (coord/extent)·bins.
    let raw = (coord * bins as f64 / extent).floor();
    raw.clamp(0.0, (bins - 1) as f64) as u32
}

/// Center of `bin` in pixel units.
pub fn bin_center(bin: u32, extent: f64, bins: u32) -> f64 {
    (bin as f64 + 0.5) * extent / bins as f64
}

/// Location ids for x1, y1, x2, y2 in that order.
pub fn box_to_tokens(b: &BBox, vocab: &VocabSizes) -> Result<[u32; 4]> {
    b.validate()?;
    let l = vocab.locations;
    Ok([
        vocab.location_id(coord_bin(b.x1, b.width, l))?,
        vocab.location_id(coord_bin(b.y1, b.height, l))?,
        vocab.location_id(coord_bin(b.x2, b.width, l))?,
        vocab.location_id(coord_bin(b.y2, b.height, l))?,
    ])
}

/// Inverse of [`box_to_tokens`], returning bin centers. Coordinates that
/// fall in the same bin come back equal, so the result is not validated.
pub fn tokens_to_box(ids: &[u32], width: f64, height: f64, vocab: &VocabSizes) -> Result<BBox> {
    let &[a, b, c, d] = ids else {
        return Err(Error::Validation(format!("a box needs 4 location ids, got {}", ids.len())));
    };
    let l = vocab.locations;
    Ok(BBox {
        x1: bin_center(vocab.location_bin(a)?, width, l),
        y1: bin_center(vocab.location_bin(b)?, height, l),
        x2: bin_center(vocab.location_bin(c)?, width, l),
        y2: bin_center(vocab.location_bin(d)?, height, l),
        width,
        height,
    })
}
