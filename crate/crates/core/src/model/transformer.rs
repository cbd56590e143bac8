//! Forward passes. A [`Net`] binds one parameter set into a fresh graph;
//! building several nets over the same parameters is how data-parallel
//! workers share weights read-only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::Parameters;
use crate::numerics::{Graph, NodeId, Tensor};
use crate::tokenization::BOS;
use crate::vision::{embed_patches, EmbedderNodes};

/// One position of the encoder input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SourceItem {
    Text(u32),
    /// Raw normalized pixels of one patch, tagged with its raster index in
    /// the source image. Masked patches are replaced by a learned mask
    /// embedding.
    Patch { pixels: Vec<f64>, raster: usize, masked: bool },
}

pub struct Net<'p> {
    pub graph: Graph<'p>,
    params: &'p Parameters,
    nodes: Vec<NodeId>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'p> Net<'p> {
    pub fn new(params: &'p Parameters) -> Self {
        let mut graph = Graph::new();
        let nodes = params.tensors().iter().map(|t| graph.param(t)).collect();
        Net { graph, params, nodes, dropout: None }
    }

    /// Training-mode net: dropout at the configured rate, masks drawn from
    /// `seed`. With rate 0 this is identical to [`Net::new`].
    pub fn with_dropout(params: &'p Parameters, seed: u64) -> Self {
        let mut net = Net::new(params);
        let rate = params.config().dropout;
        if rate > 0.0 {
            net.dropout = Some((rate, ChaCha8Rng::seed_from_u64(seed)));
        }
        net
    }

    pub fn params(&self) -> &'p Parameters {
        self.params
    }

    pub fn node(&self, name: &str) -> NodeId {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from layout"));
        self.nodes[i]
    }

    pub fn param_nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Gradients for every parameter, in storage order, after `backward`.
    pub fn take_param_grads(&mut self) -> Vec<Tensor> {
        let nodes = self.nodes.clone();
        nodes.into_iter().map(|n| self.graph.take_grad(n)).collect()
    }

    fn maybe_dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let Some((rate, rng)) = self.dropout.as_mut() else { return Ok(x) };
        let rate = *rate;
        let keep: Vec<bool> =
            (0..self.graph.value(x).len()).map(|_| rng.random::<f64>() >= rate).collect();
        self.graph.dropout(x, &keep, rate)
    }

    fn layer_norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let (g, b) = (self.node(&format!("{prefix}.g")), self.node(&format!("{prefix}.b")));
        let n = self.graph.layer_norm(x)?;
        let n = self.graph.mul_row(n, g)?;
        self.graph.add_row(n, b)
    }

    fn linear(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let (w, b) = (self.node(w), self.node(b));
        let y = self.graph.matmul(x, w)?;
        self.graph.add_row(y, b)
    }

    fn attention(&mut self, prefix: &str, query: NodeId, memory: NodeId, causal: bool) -> Result<NodeId> {
        let cfg = self.params.config();
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let q = self.linear(query, &format!("{prefix}.q.w"), &format!("{prefix}.q.b"))?;
        let k = self.linear(memory, &format!("{prefix}.k.w"), &format!("{prefix}.k.b"))?;
        let v = self.linear(memory, &format!("{prefix}.v.w"), &format!("{prefix}.v.b"))?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.graph.slice_cols(q, h * dh, dh)?;
            let kh = self.graph.slice_cols(k, h * dh, dh)?;
            let vh = self.graph.slice_cols(v, h * dh, dh)?;
            let s = self.graph.matmul_nt(qh, kh)?;
            let s = self.graph.scale(s, scale)?;
            let p = if causal { self.graph.causal_softmax_rows(s)? } else { self.graph.softmax_rows(s)? };
            ctx.push(self.graph.matmul(p, vh)?);
        }
        let joined = if heads == 1 { ctx[0] } else { self.graph.concat_cols(&ctx)? };
        self.linear(joined, &format!("{prefix}.o.w"), &format!("{prefix}.o.b"))
    }

    fn feed_forward(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.graph.gelu(h)?;
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn residual(&mut self, x: NodeId, branch: NodeId) -> Result<NodeId> {
        let branch = self.maybe_dropout(branch)?;
        self.graph.add(x, branch)
    }

    fn add_positions(&mut self, x: NodeId, table: &str, len: usize) -> Result<NodeId> {
        let table = self.node(table);
        let pos = self.graph.gather_rows(table, &(0..len).collect::<Vec<_>>())?;
        self.graph.add(x, pos)
    }

    fn embedder_nodes(&self) -> EmbedderNodes {
        EmbedderNodes {
            conv1_w: self.node("patch.conv1.w"),
            conv1_b: self.node("patch.conv1.b"),
            conv2_w: self.node("patch.conv2.w"),
            conv2_b: self.node("patch.conv2.b"),
            proj_w: self.node("patch.proj.w"),
            proj_b: self.node("patch.proj.b"),
        }
    }

    /// Embeds a mixed text/patch sequence, adds source positions and runs
    /// the bidirectional encoder stack. Returns a `len × d_model` node.
    pub fn encode_source(&mut self, items: &[SourceItem]) -> Result<NodeId> {
        let cfg = self.params.config().clone();
        if items.is_empty() {
            return Err(Error::Contract("empty source sequence".into()));
        }
        if items.len() > cfg.max_src {
            return Err(Error::Length { len: items.len(), limit: cfg.max_src });
        }
        let total = cfg.vocab.total();
        let mut text = Vec::new();
        let mut patches: Vec<&[f64]> = Vec::new();
        let mut masked = 0usize;
        // Where each item lands in [text rows | patch rows | mask rows].
        let mut origin = Vec::with_capacity(items.len());
        for item in items {
            match item {
                SourceItem::Text(id) => {
                    if *id >= total {
                        return Err(Error::Range { id: *id, detail: format!("vocabulary has {total} ids") });
                    }
                    origin.push((0, text.len()));
                    text.push(*id as usize);
                }
                SourceItem::Patch { pixels, masked: false, .. } => {
                    origin.push((1, patches.len()));
                    patches.push(pixels);
                }
                SourceItem::Patch { masked: true, .. } => {
                    origin.push((2, masked));
                    masked += 1;
                }
            }
        }
        let mut blocks = Vec::new();
        let mut offsets = [0usize; 3];
        if !text.is_empty() {
            let table = self.node("embed.tokens");
            blocks.push(self.graph.gather_rows(table, &text)?);
        }
        offsets[1] = text.len();
        if !patches.is_empty() {
            let nodes = self.embedder_nodes();
            blocks.push(embed_patches(&mut self.graph, &nodes, &cfg.embedder(), &patches)?);
        }
        offsets[2] = text.len() + patches.len();
        if masked > 0 {
            let mask = self.node("embed.mask_patch");
            blocks.push(self.graph.gather_rows(mask, &vec![0; masked])?);
        }
        let stacked = if blocks.len() == 1 { blocks[0] } else { self.graph.concat_rows(&blocks)? };
        let order: Vec<usize> = origin.iter().map(|&(b, i)| offsets[b] + i).collect();
        let in_order = if order.iter().enumerate().all(|(i, &o)| i == o) {
            stacked
        } else {
            self.graph.gather_rows(stacked, &order)?
        };
        let x = self.add_positions(in_order, "embed.src_pos", items.len())?;
        let mut x = self.maybe_dropout(x)?;
        for i in 0..cfg.encoder_layers {
            let h = self.layer_norm(x, &format!("enc.{i}.ln1"))?;
            let a = self.attention(&format!("enc.{i}.self"), h, h, false)?;
            x = self.residual(x, a)?;
            let h = self.layer_norm(x, &format!("enc.{i}.ln2"))?;
            let f = self.feed_forward(h, &format!("enc.{i}.ffn"))?;
            x = self.residual(x, f)?;
        }
        if cfg.encoder_layers > 0 {
            x = self.layer_norm(x, "enc.ln")?;
        }
        Ok(x)
    }

    /// Logits over the whole vocabulary for every prefix position; row `t`
    /// predicts token `t + 1` and depends only on `prefix[..=t]`.
    pub fn decode_logits(&mut self, encoder_states: NodeId, prefix: &[u32]) -> Result<NodeId> {
        let cfg = self.params.config().clone();
        if prefix.first() != Some(&BOS) {
            return Err(Error::Contract("target prefix must start with BOS".into()));
        }
        if prefix.len() > cfg.max_tgt {
            return Err(Error::Contract(format!(
                "target prefix of {} exceeds max_tgt {}",
                prefix.len(),
                cfg.max_tgt
            )));
        }
        let total = cfg.vocab.total();
        if let Some(&bad) = prefix.iter().find(|&&id| id >= total) {
            return Err(Error::Range { id: bad, detail: format!("vocabulary has {total} ids") });
        }
        let table = self.node("embed.tokens");
        let ids: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
        let x = self.graph.gather_rows(table, &ids)?;
        let x = self.add_positions(x, "embed.tgt_pos", prefix.len())?;
        let mut x = self.maybe_dropout(x)?;
        for i in 0..cfg.decoder_layers {
            let h = self.layer_norm(x, &format!("dec.{i}.ln1"))?;
            let a = self.attention(&format!("dec.{i}.self"), h, h, true)?;
            x = self.residual(x, a)?;
            let h = self.layer_norm(x, &format!("dec.{i}.ln2"))?;
            let c = self.attention(&format!("dec.{i}.cross"), h, encoder_states, false)?;
            x = self.residual(x, c)?;
            let h = self.layer_norm(x, &format!("dec.{i}.ln3"))?;
            let f = self.feed_forward(h, &format!("dec.{i}.ffn"))?;
            x = self.residual(x, f)?;
        }
        if cfg.decoder_layers > 0 {
            x = self.layer_norm(x, "dec.ln")?;
        }
        self.graph.matmul_nt(x, table)
    }
}

/// Encoder states for a source, without keeping the graph.
pub fn encode_source(params: &Parameters, items: &[SourceItem]) -> Result<Tensor> {
    let mut net = Net::new(params);
    let enc = net.encode_source(items)?;
    Ok(net.graph.value(enc).clone())
}

/// Decoder logits given precomputed encoder states.
pub fn decode_logits(params: &Parameters, encoder_states: &Tensor, prefix: &[u32]) -> Result<Tensor> {
    let d = params.config().d_model;
    if encoder_states.dims2().1 != d {
        return Err(Error::Shape(format!("encoder states must have {d} columns")));
    }
    let mut net = Net::new(params);
    let enc = net.graph.input(encoder_states.clone());
    let logits = net.decode_logits(enc, prefix)?;
    Ok(net.graph.value(logits).clone())
}
