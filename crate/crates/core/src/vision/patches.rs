use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::vision::image::Image;

/// Non-overlapping square patches in raster order. Each patch vector is
/// `patch_size² · channels` long, ordered (row, col, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub patches: Vec<Vec<f64>>,
    /// Strictly increasing raster indices kept by subsampling, if any.
    pub kept: Option<Vec<usize>>,
}

impl PatchGrid {
    pub fn dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        match &self.kept {
            Some(k) => k.clone(),
            None => (0..self.patches.len()).collect(),
        }
    }

    pub fn kept_patches(&self) -> Vec<&[f64]> {
        self.kept_indices().into_iter().map(|i| self.patches[i].as_slice()).collect()
    }

    pub fn kept_count(&self) -> usize {
        self.kept.as_ref().map_or(self.patches.len(), Vec::len)
    }
}

/// Center-crops to the largest multiple of `patch_size` on each axis and
/// cuts the image into patches.
pub fn patchify(image: &Image, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(Error::Validation("patch size must be at least 1".into()));
    }
    if image.height < patch_size || image.width < patch_size {
        return Err(Error::Shape(format!(
            "{}x{} image is smaller than patch size {patch_size}",
            image.height, image.width
        )));
    }
    let rows = image.height / patch_size;
    let cols = image.width / patch_size;
    let top = (image.height - rows * patch_size) / 2;
    let left = (image.width - cols * patch_size) / 2;
    let c = image.channels;
    let mut patches = Vec::with_capacity(rows * cols);
    for pr in 0..rows {
        for pc in 0..cols {
            let mut v = Vec::with_capacity(patch_size * patch_size * c);
            for y in 0..patch_size {
                let start = ((top + pr * patch_size + y) * image.width + left + pc * patch_size) * c;
                v.extend_from_slice(&image.data[start..start + patch_size * c]);
            }
            patches.push(v);
        }
    }
    Ok(PatchGrid { rows, cols, patch_size, channels: c, patches, kept: None })
}

/// Keeps at most `max_count` patches, chosen uniformly without replacement
/// under `seed`, in raster order.
pub fn subsample_patches(grid: &PatchGrid, max_count: usize, seed: u64) -> Result<PatchGrid> {
    if max_count == 0 {
        return Err(Error::Validation("max_count must be at least 1".into()));
    }
    let mut out = grid.clone();
    let current = grid.kept_indices();
    if current.len() > max_count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> =
            index::sample(&mut rng, current.len(), max_count).into_iter().map(|i| current[i]).collect();
        picked.sort_unstable();
        out.kept = Some(picked);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize) -> Image {
        let bytes: Vec<u8> = (0..h * w).map(|i| (i % 251) as u8).collect();
        Image::from_bytes(h, w, 1, &bytes).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patchify(&gray(16, 16), 8).unwrap().patches.len(), 4);
        let g = patchify(&gray(224, 224), 8).unwrap();
        assert_eq!((g.rows, g.cols, g.patches.len()), (28, 28, 784));
        assert_eq!(patchify(&gray(17, 17), 8).unwrap().patches.len(), 4);
        assert!(matches!(patchify(&gray(7, 16), 8), Err(Error::Shape(_))));
    }

    #[test]
    fn center_crop_offsets() {
        // 18 wide, patch 8: crop 2 columns, one from each side.
        let img = gray(8, 18);
        let g = patchify(&img, 8).unwrap();
        assert_eq!(g.patches[0][0], img.get(0, 1, 0));
        assert_eq!(g.patches[1][0], img.get(0, 9, 0));
    }

    #[test]
    fn patch_layout_is_row_col_channel() {
        let bytes: Vec<u8> = (0..4 * 4 * 3).map(|i| i as u8).collect();
        let img = Image::from_bytes(4, 4, 3, &bytes).unwrap();
        let g = patchify(&img, 2).unwrap();
        // Patch 1 (top right) row 1, col 0, channel 2 is pixel (1, 2).
        assert_eq!(g.patches[1][2 * 3 + 2], img.get(1, 2, 2));
    }

    #[test]
    fn subsample_default_budget() {
        let g = patchify(&gray(224, 224), 8).unwrap();
        let s = subsample_patches(&g, 196, 7).unwrap();
        let kept = s.kept.as_ref().unwrap();
        assert_eq!(kept.len(), 196);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, subsample_patches(&g, 196, 7).unwrap());
        assert_ne!(s, subsample_patches(&g, 196, 8).unwrap());
    }

    #[test]
    fn subsample_under_limit_is_identity() {
        let g = patchify(&gray(16, 16), 8).unwrap();
        assert_eq!(subsample_patches(&g, 196, 1).unwrap(), g);
    }
}
