//! Trainable patch feature extractor: two 3×3 convolutions over each
//! patch's pixel grid, then a linear projection to the model width.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, GATHER_ZERO};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub patch_size: usize,
    pub channels: usize,
    /// Feature maps produced by each convolution.
    pub hidden: usize,
    pub d_model: usize,
}

impl EmbedderConfig {
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// `(name, shape)` for every embedder tensor, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let EmbedderConfig { patch_size: p, channels: c, hidden: h, d_model: d } = *self;
        vec![
            ("patch.conv1.w".into(), vec![9 * c, h]),
            ("patch.conv1.b".into(), vec![h]),
            ("patch.conv2.w".into(), vec![9 * h, h]),
            ("patch.conv2.b".into(), vec![h]),
            ("patch.proj.w".into(), vec![p * p * h, d]),
            ("patch.proj.b".into(), vec![d]),
        ]
    }
}

/// Graph nodes holding the embedder parameters.
#[derive(Debug, Clone, Copy)]
pub struct EmbedderNodes {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub proj_w: NodeId,
    pub proj_b: NodeId,
}

/// im2col gather for a same-padded 3×3 convolution. Input rows are
/// `(patch, y, x)` with `channels` columns; output rows are the same with
/// `9 · channels` columns ordered (ky, kx, channel).
fn im2col_index(patches: usize, size: usize, channels: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(patches * size * size * 9 * channels);
    for p in 0..patches {
        for y in 0..size as isize {
            for x in 0..size as isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (sy, sx) = (y + dy, x + dx);
                        let inside = sy >= 0 && sx >= 0 && sy < size as isize && sx < size as isize;
                        for c in 0..channels {
                            idx.push(if inside {
                                ((p * size * size) + sy as usize * size + sx as usize) * channels + c
                            } else {
                                GATHER_ZERO
                            });
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Features for the given raw patches: an `n × d_model` node.
pub fn embed_patches(
    graph: &mut Graph<'_>,
    nodes: &EmbedderNodes,
    config: &EmbedderConfig,
    patches: &[&[f64]],
) -> Result<NodeId> {
    let n = patches.len();
    let dim = config.patch_dim();
    if n == 0 {
        return Err(Error::Shape("no patches to embed".into()));
    }
    if let Some(bad) = patches.iter().find(|p| p.len() != dim) {
        return Err(Error::Shape(format!(
            "patch of length {} but the embedder expects {dim}",
            bad.len()
        )));
    }
    let p = config.patch_size;
    let pixels = p * p;
    let raw = graph.input(crate::numerics::Tensor::matrix(n * pixels, config.channels, patches.concat())?);

    let cols1 = graph.gather(raw, im2col_index(n, p, config.channels), vec![n * pixels, 9 * config.channels])?;
    let h1 = graph.matmul(cols1, nodes.conv1_w)?;
    let h1 = graph.add_row(h1, nodes.conv1_b)?;
    let h1 = graph.gelu(h1)?;

    let cols2 = graph.gather(h1, im2col_index(n, p, config.hidden), vec![n * pixels, 9 * config.hidden])?;
    let h2 = graph.matmul(cols2, nodes.conv2_w)?;
    let h2 = graph.add_row(h2, nodes.conv2_b)?;
    let h2 = graph.gelu(h2)?;

    let flat = graph.reshape(h2, vec![n, pixels * config.hidden])?;
    let out = graph.matmul(flat, nodes.proj_w)?;
    graph.add_row(out, nodes.proj_b)
}
