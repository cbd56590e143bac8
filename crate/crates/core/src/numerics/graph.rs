//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is append-only: every operation pushes a node whose parents
//! already exist, so insertion order is a topological order. Leaves either
//! own their value or borrow it from a parameter store for the graph's
//! lifetime, which lets many graphs share one set of parameters read-only.

use crate::error::{check_finite, Error, Result};
use crate::numerics::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index into a flat tensor used by [`Graph::gather`] to mean "write zero".
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softmax { x: NodeId, causal: bool },
    LayerNorm { x: NodeId, inv_std: Vec<f64> },
    GatherRows { x: NodeId, rows: Vec<usize> },
    Gather { x: NodeId, index: Vec<usize> },
    Reshape(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    Dropout { x: NodeId, mask: Vec<f64> },
    SmoothedXent(Box<XentCache>),
}

#[derive(Debug, Clone)]
struct XentCache {
    logits: NodeId,
    /// Softmax probabilities of the logits.
    probs: Vec<f64>,
    targets: Vec<u32>,
    ignore: Option<u32>,
    smoothing: f64,
    counted: usize,
}

#[derive(Debug)]
enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

#[derive(Debug)]
struct Node<'p> {
    op: Op,
    value: Value<'p>,
}

#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Tensor>>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value: Value::Owned(value) });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf owning its value.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// A leaf borrowing a parameter tensor.
    pub fn param(&mut self, value: &'p Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Leaf, value: Value::Borrowed(value) });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMulNt(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    fn row_broadcast(&self, op: &str, x: NodeId, row: NodeId) -> Result<(usize, usize)> {
        let (r, c) = self.value(x).dims2();
        if self.value(row).len() != c {
            return Err(Error::Shape(format!(
                "{op}: row vector of {} against {} columns",
                self.value(row).len(),
                c
            )));
        }
        Ok((r, c))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, c) = self.row_broadcast("add_row", x, row)?;
        let r = self.value(row).data();
        let data: Vec<f64> =
            self.value(x).data().iter().enumerate().map(|(i, v)| v + r[i % c]).collect();
        check_finite("add_row", &data)?;
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::AddRow(x, row), v))
    }

    /// Multiplies every row of `x` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, c) = self.row_broadcast("mul_row", x, row)?;
        let r = self.value(row).data();
        let data: Vec<f64> =
            self.value(x).data().iter().enumerate().map(|(i, v)| v * r[i % c]).collect();
        check_finite("mul_row", &data)?;
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::MulRow(x, row), v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let data: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        check_finite("scale", &data)?;
        let v = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(Op::Scale(x, c), v))
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::gelu(self.value(x))?;
        Ok(self.push(Op::Gelu(x), v))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(x), false)?;
        Ok(self.push(Op::Softmax { x, causal: false }, v))
    }

    /// Row `i` attends only to columns `0..=i`.
    pub fn causal_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = tensor::softmax_rows(self.value(x), true)?;
        Ok(self.push(Op::Softmax { x, causal: true }, v))
    }

    /// Per-row standardization, no affine terms.
    pub fn layer_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let (v, inv_std) = tensor::layer_norm_rows(self.value(x))?;
        Ok(self.push(Op::LayerNorm { x, inv_std }, v))
    }

    /// Picks rows of a matrix (with repetition), e.g. an embedding lookup.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let src = self.value(x);
        let (r, c) = src.dims2();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Shape(format!("gather_rows: row {i} of {r}")));
            }
            data.extend_from_slice(src.row(i));
        }
        let v = Tensor::matrix(rows.len(), c, data)?;
        Ok(self.push(Op::GatherRows { x, rows: rows.to_vec() }, v))
    }

    /// General linear gather over the flattened input: output element `o`
    /// is `x[index[o]]`, or zero where `index[o] == GATHER_ZERO`.
    pub fn gather(&mut self, x: NodeId, index: Vec<usize>, shape: Vec<usize>) -> Result<NodeId> {
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            if i == GATHER_ZERO {
                data.push(0.0);
            } else if i < src.len() {
                data.push(src[i]);
            } else {
                return Err(Error::Shape(format!("gather: index {i} of {}", src.len())));
            }
        }
        let v = Tensor::new(shape, data)?;
        Ok(self.push(Op::Gather { x, index }, v))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), v))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(x);
        let (r, c) = src.dims2();
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!("slice_cols {start}+{len} of {c}")));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let v = Tensor::matrix(r, len, data)?;
        Ok(self.push(Op::SliceCols { x, start }, v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_rows of nothing".into()));
        };
        let c = self.value(first).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2();
            if pc != c {
                return Err(Error::Shape(format!("concat_rows: {pc} vs {c} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::matrix(rows, c, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_cols of nothing".into()));
        };
        let r = self.value(first).dims2().0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pr != r {
                return Err(Error::Shape(format!("concat_cols: {pr} vs {r} rows")));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::matrix(r, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        check_finite("sum", &[s])?;
        Ok(self.push(Op::Sum(x), Tensor::scalar(s)))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        check_finite("mean", &[s])?;
        Ok(self.push(Op::Mean(x), Tensor::scalar(s)))
    }

    /// Inverted dropout with a caller-supplied keep mask (1 keep, 0 drop).
    pub fn dropout(&mut self, x: NodeId, keep: &[bool], rate: f64) -> Result<NodeId> {
        let t = self.value(x);
        if keep.len() != t.len() {
            return Err(Error::Shape("dropout mask length".into()));
        }
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let data: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { x, mask }, v))
    }

    /// Label-smoothed cross-entropy averaged over the rows whose target is
    /// not `ignore`. Row `t` of `logits` predicts `targets[t]`; the smoothed
    /// target puts `1 - smoothing` on the gold id and spreads `smoothing`
    /// uniformly over the whole row.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        smoothing: f64,
        ignore: Option<u32>,
    ) -> Result<NodeId> {
        let lt = self.value(logits);
        let (r, c) = lt.dims2();
        if targets.len() != r {
            return Err(Error::Shape(format!("{} targets for {r} logit rows", targets.len())));
        }
        let counted = targets.iter().filter(|&&t| Some(t) != ignore).count();
        if counted == 0 {
            return Err(Error::Contract("cross-entropy with every target ignored".into()));
        }
        let logp = tensor::log_softmax_rows(lt)?;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if Some(t) == ignore {
                continue;
            }
            if t as usize >= c {
                return Err(Error::Range { id: t, detail: format!("logit width {c}") });
            }
            let row = logp.row(i);
            let nll = -row[t as usize];
            let uniform = -row.iter().sum::<f64>() / c as f64;
            total += (1.0 - smoothing) * nll + smoothing * uniform;
        }
        let loss = total / counted as f64;
        check_finite("cross_entropy", &[loss])?;
        let probs = logp.into_data().into_iter().map(f64::exp).collect();
        let cache = XentCache {
            logits,
            probs,
            targets: targets.to_vec(),
            ignore,
            smoothing,
            counted,
        };
        Ok(self.push(Op::SmoothedXent(Box::new(cache)), Tensor::scalar(loss)))
    }

    /// Gradient of the last `backward` loss with respect to `id`. Nodes not
    /// on any path to the loss get zeros.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.value(id).shape()),
        }
    }

    /// Takes the gradient out of its slot, avoiding a copy.
    pub fn take_grad(&mut self, id: NodeId) -> Tensor {
        match self.grads.get_mut(id.0).and_then(Option::take) {
            Some(g) => g,
            None => Tensor::zeros(self.value(id).shape()),
        }
    }

    /// Fills gradient slots with d(loss)/d(node) for every node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) -> Result<()> {
        check_finite("backward", delta.data())?;
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn like(&self, id: NodeId, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(id).shape().to_vec(), data).expect("gradient shape")
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<()> {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.propagate_op(i, &op, g);
        self.nodes[i].op = op;
        result
    }

    fn propagate_op(&mut self, i: usize, op: &Op, g: &Tensor) -> Result<()> {
        let gd = g.data();
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = tensor::matmul_nt(g, self.value(b))?;
                let db = tensor::matmul_tn(self.value(a), g)?;
                let (da, db) = (self.like(a, da.into_data()), self.like(b, db.into_data()));
                self.accumulate(a, da)?;
                self.accumulate(b, db)?;
            }
            Op::MatMulNt(a, b) => {
                let da = tensor::matmul(g, self.value(b))?;
                let db = tensor::matmul_tn(g, self.value(a))?;
                let (da, db) = (self.like(a, da.into_data()), self.like(b, db.into_data()));
                self.accumulate(a, da)?;
                self.accumulate(b, db)?;
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone())?;
                self.accumulate(b, self.like(b, gd.to_vec()))?;
            }
            Op::AddRow(x, row) => {
                let c = self.value(row).len();
                let mut dr = vec![0.0; c];
                for (k, v) in gd.iter().enumerate() {
                    dr[k % c] += v;
                }
                self.accumulate(x, self.like(x, gd.to_vec()))?;
                self.accumulate(row, self.like(row, dr))?;
            }
            Op::MulRow(x, row) => {
                let c = self.value(row).len();
                let r = self.value(row).data();
                let xv = self.value(x).data();
                let mut dr = vec![0.0; c];
                let mut dx = Vec::with_capacity(gd.len());
                for (k, v) in gd.iter().enumerate() {
                    dr[k % c] += v * xv[k];
                    dx.push(v * r[k % c]);
                }
                self.accumulate(x, self.like(x, dx))?;
                self.accumulate(row, self.like(row, dr))?;
            }
            Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let da: Vec<f64> = gd.iter().zip(bv).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = gd.iter().zip(av).map(|(g, a)| g * a).collect();
                self.accumulate(a, self.like(a, da))?;
                self.accumulate(b, self.like(b, db))?;
            }
            Op::Scale(x, c) => {
                let dx = gd.iter().map(|g| g * c).collect();
                self.accumulate(x, self.like(x, dx))?;
            }
            Op::Gelu(x) => {
                let xv = self.value(x).data();
                let dx = gd.iter().zip(xv).map(|(g, &v)| g * tensor::gelu_derivative(v)).collect();
                self.accumulate(x, self.like(x, dx))?;
            }
            Op::Softmax { x, causal } => {
                let y = self.value(NodeId(i));
                let (r, c) = y.dims2();
                let yd = y.data();
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let w = if causal { (row + 1).min(c) } else { c };
                    let span = row * c..row * c + w;
                    let dot: f64 = gd[span.clone()].iter().zip(&yd[span.clone()]).map(|(g, y)| g * y).sum();
                    for k in span {
                        dx[k] = yd[k] * (gd[k] - dot);
                    }
                }
                self.accumulate(x, self.like(x, dx))?;
            }
            Op::LayerNorm { x, ref inv_std } => {
                let y = self.value(NodeId(i));
                let (r, c) = y.dims2();
                let yd = y.data();
                let mut dx = vec![0.0; r * c];
                for (row, &inv) in inv_std.iter().enumerate().take(r) {
                    let span = row * c..(row + 1) * c;
                    let gm = gd[span.clone()].iter().sum::<f64>() / c as f64;
                    let gy = gd[span.clone()].iter().zip(&yd[span.clone()]).map(|(g, y)| g * y).sum::<f64>()
                        / c as f64;
                    for k in span {
                        dx[k] = inv * (gd[k] - gm - yd[k] * gy);
                    }
                }
                self.accumulate(x, self.like(x, dx))?;
            }
            Op::GatherRows { x, ref rows } => {
                let (r, c) = self.value(x).dims2();
                let mut dx = vec![0.0; r * c];
                for (k, &src) in rows.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += gd[k * c + j];
                    }
                }
                self.accumulate(x, self.like(x, dx))?;
            }
            Op::Gather { x, ref index } => {
                let mut dx = vec![0.0; self.value(x).len()];
                for (o, &src) in index.iter().enumerate() {
                    if src != GATHER_ZERO {
                        dx[src] += gd[o];
                    }
                }
                self.accumulate(x, self.like(x, dx))?;
            }
            Op::Reshape(x) => {
                self.accumulate(x, self.like(x, gd.to_vec()))?;
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(x).dims2();
                let len = g.dims2().1;
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    dx[row * c + start..row * c + start + len].copy_from_slice(g.row(row));
                }
                self.accumulate(x, self.like(x, dx))?;
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let d = self.like(p, gd[offset..offset + n].to_vec());
                    offset += n;
                    self.accumulate(p, d)?;
                }
            }
            Op::ConcatCols(ref parts) => {
                let (r, total) = g.dims2();
                let mut start = 0;
                for &p in parts {
                    let pc = self.value(p).dims2().1;
                    let mut d = Vec::with_capacity(r * pc);
                    for row in 0..r {
                        d.extend_from_slice(&gd[row * total + start..row * total + start + pc]);
                    }
                    start += pc;
                    self.accumulate(p, self.like(p, d))?;
                }
            }
            Op::Sum(x) => {
                let dx = vec![gd[0]; self.value(x).len()];
                self.accumulate(x, self.like(x, dx))?;
            }
            Op::Mean(x) => {
                let n = self.value(x).len();
                let dx = vec![gd[0] / n as f64; n];
                self.accumulate(x, self.like(x, dx))?;
            }
            Op::Dropout { x, ref mask } => {
                let dx = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(x, self.like(x, dx))?;
            }
            Op::SmoothedXent(ref cache) => {
                let (r, c) = self.value(cache.logits).dims2();
                let scale = gd[0] / cache.counted as f64;
                let uniform = cache.smoothing / c as f64;
                let mut dx = vec![0.0; r * c];
                for (row, &t) in cache.targets.iter().enumerate() {
                    if Some(t) == cache.ignore {
                        continue;
                    }
                    for j in 0..c {
                        let k = row * c + j;
                        let gold = if j == t as usize { 1.0 - cache.smoothing } else { 0.0 };
                        dx[k] = scale * (cache.probs[k] - gold - uniform);
                    }
                }
                let d = self.like(cache.logits, dx);
                self.accumulate(cache.logits, d)?;
            }
        }
        Ok(())
    }
}
