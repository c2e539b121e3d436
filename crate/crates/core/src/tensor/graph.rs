//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation in execution order. Because nodes
//! can only reference earlier nodes, the tape order is already a
//! topological order and `backward` replays it from the end. Graphs are
//! built fresh for every step and dropped afterwards.

use std::ops::Range;
use std::sync::Arc;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Constant keys/values visible to every query of an attention call,
/// typically gathered from a KV cache. Rows are `d_model` wide.
#[derive(Clone, Debug, Default)]
pub struct Prefix<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub positions: Vec<usize>,
}

/// Row bookkeeping for attention: which rows form one causal sequence,
/// and the absolute position of each row.
#[derive(Clone, Debug)]
pub struct AttnLayout<T> {
    pub positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
    pub prefix: Option<Prefix<T>>,
}

impl<T> AttnLayout<T> {
    /// One sequence occupying every row.
    pub fn single(positions: Vec<usize>) -> Self {
        let n = positions.len();
        AttnLayout {
            positions,
            segments: vec![0..n],
            prefix: None,
        }
    }

    /// `batch` sequences of `len` rows each, positions `0..len`.
    pub fn batched(batch: usize, len: usize) -> Self {
        AttnLayout {
            positions: (0..batch).flat_map(|_| 0..len).collect(),
            segments: (0..batch).map(|b| b * len..(b + 1) * len).collect(),
            prefix: None,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    RowScale {
        x: NodeId,
        scales: Vec<T>,
    },
    Sum(NodeId),
    Silu(NodeId),
    Softmax {
        x: NodeId,
        outer: usize,
        len: usize,
        inner: usize,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<T>,
    },
    Rope {
        x: NodeId,
        cos: Vec<T>,
        sin: Vec<T>,
        n_heads: usize,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        layout: AttnLayout<T>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        active: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Graph<T> {
    /// A graph that records gradients for `requires_grad` leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that only evaluates; nothing is retained for backward.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, inputs: &[NodeId], op: Op<T>) -> NodeId {
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Binds a tensor as a leaf. Shares the payload.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared(),
            requires_grad: self.grad_enabled && t.requires_grad,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// Copy of `x` with no connection to its history.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let node = &self.nodes[x.0];
        let (shape, value) = (node.shape.clone(), Arc::clone(&node.value));
        self.nodes.push(Node {
            shape,
            value,
            requires_grad: false,
            op: Op::Leaf,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, x: NodeId) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn value(&self, x: NodeId) -> &[T] {
        &self.nodes[x.0].value
    }

    pub fn requires_grad(&self, x: NodeId) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Value of a node as a standalone tensor, with its gradient if one
    /// was produced by `backward`.
    pub fn tensor(&self, x: NodeId) -> Tensor<T> {
        let node = &self.nodes[x.0];
        let mut t = Tensor::from_shared(node.shape.clone(), Arc::clone(&node.value));
        t.requires_grad = node.requires_grad;
        t.grad = self.grad(x).map(<[T]>::to_vec);
        t
    }

    pub fn grad(&self, x: NodeId) -> Option<&[T]> {
        self.grads.get(x.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, x: NodeId) -> Result<(usize, usize)> {
        match self.nodes[x.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(format!("expected 2-D operand, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
        );
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.value(x).iter().map(|v| *v * c).collect();
        self.push(self.shape(x).to_vec(), out, &[x], Op::Scale(x, c))
    }

    /// Multiplies every element of row `i` by the constant `scales[i]`.
    pub fn row_scale(&mut self, x: NodeId, scales: Vec<T>) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x)?;
        if scales.len() != rows {
            return Err(Error::dim(format!(
                "row_scale: {} scales for {rows} rows",
                scales.len()
            )));
        }
        let out = self
            .value(x)
            .chunks(cols.max(1))
            .zip(&scales)
            .flat_map(|(row, &s)| row.iter().map(move |v| *v * s))
            .collect();
        Ok(self.push(vec![rows, cols], out, &[x], Op::RowScale { x, scales }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![], vec![s], &[x], Op::Sum(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, &[x], Op::Silu(x))
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xs = self.value(x);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut out = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xs[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xs[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(shape, out, &[x], Op::Softmax { x, outer, len, inner }))
    }

    /// Row-wise RMS normalisation with a learned gain over the last axis.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x)?;
        if self.value(gain).len() != cols {
            return Err(Error::dim(format!(
                "rms_norm gain has {} entries, rows have {cols}",
                self.value(gain).len()
            )));
        }
        let eps = T::of(eps);
        let n = T::of(cols as f64);
        let xs = self.value(x);
        let g = self.value(gain);
        let mut out = Vec::with_capacity(xs.len());
        let mut inv_rms = Vec::with_capacity(rows);
        for row in xs.chunks(cols) {
            let ms = row.iter().map(|v| *v * *v).sum::<T>() / n;
            let r = (ms + eps).sqrt().recip();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(v, gv)| *v * r * *gv));
        }
        Ok(self.push(vec![rows, cols], out, &[x, gain], Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Rotary position encoding applied per head, rotating the pairs
    /// `(i, i + head_dim/2)` of each head by `position · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: NodeId, positions: &[usize], n_heads: usize, base: f64) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x)?;
        if positions.len() != rows || n_heads == 0 || cols % n_heads != 0 || (cols / n_heads) % 2 != 0 {
            return Err(Error::dim(format!(
                "rope: {rows}x{cols} with {} positions and {n_heads} heads",
                positions.len()
            )));
        }
        let head_dim = cols / n_heads;
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(T::of(theta.cos()));
                sin.push(T::of(theta.sin()));
            }
        }
        let xs = self.value(x);
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            for h in 0..n_heads {
                let base_idx = r * cols + h * head_dim;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let (a, b) = (xs[base_idx + i], xs[base_idx + i + half]);
                    out[base_idx + i] = a * c - b * s;
                    out[base_idx + i + half] = a * s + b * c;
                }
            }
        }
        Ok(self.push(vec![rows, cols], out, &[x], Op::Rope { x, cos, sin, n_heads }))
    }

    /// Row lookup into a `[vocab × d]` table.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, d) = self.dims2(table)?;
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "token id",
                    index: id,
                    limit: vocab,
                });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Causal multi-head attention. Queries, keys and values are `[rows × d]`
    /// with rotary encoding already applied. Each query attends to prefix
    /// entries and same-segment rows whose position does not exceed its own.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        layout: AttnLayout<T>,
    ) -> Result<NodeId> {
        let (rows, d) = self.dims2(q)?;
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        if layout.positions.len() != rows || n_heads == 0 || d % n_heads != 0 {
            return Err(Error::dim("attention layout does not match inputs"));
        }
        if let Some(p) = &layout.prefix {
            if p.keys.len() != p.positions.len() * d || p.values.len() != p.keys.len() {
                return Err(Error::dim("attention prefix rows do not match d_model"));
            }
        }
        let head_dim = d / n_heads;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let empty = Prefix::default();
        let prefix = layout.prefix.as_ref().unwrap_or(&empty);
        let m = prefix.positions.len();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in &layout.segments {
            let s_len = seg.len();
            let keys = m + s_len;
            for h in 0..n_heads {
                let hs = h * head_dim..(h + 1) * head_dim;
                for i in seg.clone() {
                    let qpos = layout.positions[i];
                    let qi = &qs[i * d..][hs.clone()];
                    scores.clear();
                    for j in 0..keys {
                        let (kpos, kj) = if j < m {
                            (prefix.positions[j], &prefix.keys[j * d..][hs.clone()])
                        } else {
                            let r = seg.start + j - m;
                            (layout.positions[r], &ks[r * d..][hs.clone()])
                        };
                        scores.push(if kpos <= qpos {
                            dot(qi, kj) * scale
                        } else {
                            T::neg_infinity()
                        });
                    }
                    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    if !max.is_finite() {
                        return Err(Error::Numeric(format!(
                            "attention row at position {qpos} has no admissible key"
                        )));
                    }
                    let mut total = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        total += *s;
                    }
                    let oi = &mut out[i * d..][hs.clone()];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s /= total;
                        if *s == T::zero() {
                            continue;
                        }
                        let vj = if j < m {
                            &prefix.values[j * d..][hs.clone()]
                        } else {
                            &vs[(seg.start + j - m) * d..][hs.clone()]
                        };
                        axpy(oi, *s, vj);
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        Ok(self.push(
            vec![rows, d],
            out,
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                layout,
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over rows where `active` is true. With no active rows the
    /// loss is zero and no gradient flows.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], active: Option<&[bool]>) -> Result<NodeId> {
        let (n, vocab) = self.dims2(logits)?;
        if targets.len() != n {
            return Err(Error::dim(format!("{} targets for {n} logit rows", targets.len())));
        }
        let active = match active {
            Some(a) if a.len() != n => {
                return Err(Error::dim(format!("ignore mask has {} entries for {n} rows", a.len())))
            }
            Some(a) => a.to_vec(),
            None => vec![true; n],
        };
        for &t in targets {
            if t >= vocab {
                return Err(Error::Index {
                    what: "target",
                    index: t,
                    limit: vocab,
                });
            }
        }
        let xs = self.value(logits);
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("logits are not finite".into()));
        }
        let count = active.iter().filter(|a| **a).count();
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for (r, row) in xs.chunks(vocab).enumerate() {
            if !active[r] {
                continue;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (*x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            total += max + z.ln() - row[targets[r]];
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        Ok(self.push(
            vec![],
            vec![loss],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active,
                probs,
                count,
            },
        ))
    }

    /// Accumulates d(loss)/d(node) for every node that requires grad.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, op: &Op<T>, out: &[T], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |id: NodeId| -> &[T] { &self.nodes[id.0].value };
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if wants(*a) {
                    let da = acc(grads, &self.nodes, *a);
                    T::gemm(m, n, k, g, n as isize, 1, val(*b), 1, n as isize, T::one(), da);
                }
                if wants(*b) {
                    let db = acc(grads, &self.nodes, *b);
                    T::gemm(k, m, n, val(*a), 1, k as isize, g, n as isize, 1, T::one(), db);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        let d = acc(grads, &self.nodes, id);
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += *g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (id, other) in [(*a, *b), (*b, *a)] {
                    if wants(id) {
                        let o = val(other);
                        let d = acc(grads, &self.nodes, id);
                        for ((d, g), o) in d.iter_mut().zip(g).zip(o) {
                            *d += *g * *o;
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                let d = acc(grads, &self.nodes, *x);
                d.iter_mut().zip(g).for_each(|(d, g)| *d += *g * *c);
            }
            Op::RowScale { x, scales } => {
                let cols = g.len() / scales.len().max(1);
                let d = acc(grads, &self.nodes, *x);
                for (r, s) in scales.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] += g[r * cols + c] * *s;
                    }
                }
            }
            Op::Sum(x) => {
                let d = acc(grads, &self.nodes, *x);
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Silu(x) => {
                let xs = val(*x);
                let d = acc(grads, &self.nodes, *x);
                for ((d, g), &v) in d.iter_mut().zip(g).zip(xs) {
                    let s = sigmoid(v);
                    *d += *g * s * (T::one() + v * (T::one() - s));
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let d = acc(grads, &self.nodes, *x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..*len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..*len {
                            d[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xs = val(*x);
                let gs = val(*gain);
                let cols = gs.len();
                let n = T::of(cols as f64);
                if wants(*x) {
                    let d = acc(grads, &self.nodes, *x);
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        let row = &xs[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let ux: T = (0..cols).map(|j| gr[j] * gs[j] * row[j]).sum();
                        let coef = ir * ir * ir * ux / n;
                        for j in 0..cols {
                            d[r * cols + j] += ir * gr[j] * gs[j] - coef * row[j];
                        }
                    }
                }
                if wants(*gain) {
                    let d = acc(grads, &self.nodes, *gain);
                    for (r, &ir) in inv_rms.iter().enumerate() {
                        for j in 0..cols {
                            d[j] += g[r * cols + j] * xs[r * cols + j] * ir;
                        }
                    }
                }
            }
            Op::Rope { x, cos, sin, n_heads } => {
                let cols = self.nodes[x.0].shape[1];
                let head_dim = cols / n_heads;
                let half = head_dim / 2;
                let rows = g.len() / cols;
                let d = acc(grads, &self.nodes, *x);
                for r in 0..rows {
                    for h in 0..*n_heads {
                        let b = r * cols + h * head_dim;
                        for i in 0..half {
                            let (c, s) = (cos[r * half + i], sin[r * half + i]);
                            let (g1, g2) = (g[b + i], g[b + i + half]);
                            d[b + i] += g1 * c + g2 * s;
                            d[b + i + half] += g2 * c - g1 * s;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d_model = self.nodes[table.0].shape[1];
                let d = acc(grads, &self.nodes, *table);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d_model {
                        d[id * d_model + c] += g[r * d_model + c];
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_heads,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *n_heads, layout, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                active,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let vocab = self.nodes[logits.0].shape[1];
                let scale = g[0] / T::of(*count as f64);
                let d = acc(grads, &self.nodes, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    if !active[r] {
                        continue;
                    }
                    for c in 0..vocab {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        d[r * vocab + c] += (probs[r * vocab + c] - onehot) * scale;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        n_heads: usize,
        layout: &AttnLayout<T>,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.nodes[q.0].shape[1];
        let head_dim = d / n_heads;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let (qs, ks, vs) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let empty = Prefix::default();
        let prefix = layout.prefix.as_ref().unwrap_or(&empty);
        let m = prefix.positions.len();
        let rows = layout.positions.len();
        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = Vec::new();
        let mut offset = 0;
        for seg in &layout.segments {
            let keys = m + seg.len();
            for h in 0..n_heads {
                let hs = h * head_dim..(h + 1) * head_dim;
                for i in seg.clone() {
                    let p = &probs[offset..offset + keys];
                    offset += keys;
                    let gi = &g[i * d..][hs.clone()];
                    dp.clear();
                    for j in 0..keys {
                        if p[j] == T::zero() {
                            dp.push(T::zero());
                            continue;
                        }
                        let vj = if j < m {
                            &prefix.values[j * d..][hs.clone()]
                        } else {
                            &vs[(seg.start + j - m) * d..][hs.clone()]
                        };
                        dp.push(dot(gi, vj));
                    }
                    let pdp: T = p.iter().zip(&dp).map(|(a, b)| *a * *b).sum();
                    let qi = &qs[i * d..][hs.clone()];
                    for j in 0..keys {
                        if p[j] == T::zero() {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - pdp) * scale;
                        let kj = if j < m {
                            &prefix.keys[j * d..][hs.clone()]
                        } else {
                            &ks[(seg.start + j - m) * d..][hs.clone()]
                        };
                        axpy(&mut dq[i * d..][hs.clone()], ds, kj);
                        if j >= m {
                            let r = seg.start + j - m;
                            axpy(&mut dk[r * d..][hs.clone()], ds, qi);
                            axpy(&mut dv[r * d..][hs.clone()], p[j], gi);
                        }
                    }
                }
            }
        }
        for (id, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[id.0].requires_grad {
                let dst = acc(grads, &self.nodes, id);
                dst.iter_mut().zip(&buf).for_each(|(a, b)| *a += *b);
            }
        }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

fn acc<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], id: NodeId) -> &'g mut [T] {
    grads[id.0].get_or_insert_with(|| vec![T::zero(); nodes[id.0].value.len()])
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| *x * *y).sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * *b;
    }
}
