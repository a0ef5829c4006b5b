//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node whose
//! operands were pushed earlier, so reverse insertion order is a valid
//! topological order for the backward pass. Graphs are cheap to build and
//! are rebuilt for every optimisation step.

use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels::{self, Tap};
use crate::numerics::tensor::{permute_raw, softmax_in_place, split_strides, Tensor, LOG_EPS};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Label value that contributes nothing to a loss.
pub const IGNORE: u32 = u32::MAX;

enum Op {
    Leaf,
    Detached,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Gelu(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    L2Normalize(Var, Vec<f64>),
    Log(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    IndexSelect(Var, usize, Vec<usize>),
    Concat(Vec<Var>),
    Embedding(Var, Vec<usize>),
    Upsample {
        a: Var,
        rows: Vec<Tap>,
        cols: Vec<Tap>,
    },
    Nll {
        probs: Var,
        labels: Vec<u32>,
        weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape of tensor operations.
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a trainable leaf. Frozen leaves
    /// and intermediate nodes yield `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    let bl: usize = b.iter().product();
    Some(if bl == 0 { 0 } else { a.iter().product::<usize>() / bl })
}

impl Graph {
    /// A graph that records derivative information.
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            record: true,
        }
    }

    /// A graph that only evaluates; nothing can be differentiated.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    /// Adds an input tensor. Only `trainable` leaves receive gradients.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        let requires_grad = trainable && self.record;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced");
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Detached };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if suffix_broadcast(ta.shape(), tb.shape()).is_none() {
            return shape_err(format!(
                "{what}: {:?} does not broadcast onto {:?}",
                tb.shape(),
                ta.shape()
            ));
        }
        let bd = tb.data();
        let bl = bd.len().max(1);
        let data = ta
            .data()
            .chunks(bl)
            .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    /// `a + b`, where `b`'s shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a ⊙ b`, where `b`'s shape is a suffix of `a`'s.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("sub: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Batched matrix product over the last two axes.
    ///
    /// `a` is `[.., m, k]`. `b` is either a single matrix shared by every
    /// batch entry or carries the same leading axes as `a`. With `trans_b`
    /// the matrix part of `b` is `[n, k]` and is used transposed.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return shape_err(format!(
                "matmul inner extents differ: {sa:?} x {sb:?} (trans_b={trans_b})"
            ));
        }
        let shared = sb.len() == 2;
        if !shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return shape_err(format!("matmul batch axes differ: {sa:?} x {sb:?}"));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut c = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            if shared {
                let rows = batch * m;
                if trans_b {
                    kernels::gemm_nt(ad, bd, &mut c, rows, k, n);
                } else {
                    kernels::gemm_nn(ad, bd, &mut c, rows, k, n);
                }
            } else {
                for s in 0..batch {
                    let a_s = &ad[s * m * k..(s + 1) * m * k];
                    let b_s = &bd[s * k * n..(s + 1) * k * n];
                    let c_s = &mut c[s * m * n..(s + 1) * m * n];
                    if trans_b {
                        kernels::gemm_nt(a_s, b_s, c_s, m, k, n);
                    } else {
                        kernels::gemm_nn(a_s, b_s, c_s, m, k, n);
                    }
                }
            }
        }
        let op = Op::MatMul {
            a,
            b,
            trans_b,
            batch: if shared { 0 } else { batch },
            m,
            k,
            n,
        };
        Ok(self.push(Tensor::from_parts(out_shape, c), op, &[a, b]))
    }

    /// `x · wᵀ + bias` for a weight stored as `[d_out, d_in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w, true)?;
        match bias {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let last = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(last.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Normalises each last-axis row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let last = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        let mut inv = Vec::with_capacity(data.len() / last.max(1));
        for row in data.chunks_mut(last.max(1)) {
            let mean = row.iter().sum::<f64>() / last as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / last as f64;
            let s = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * s;
            }
            inv.push(s);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::LayerNorm(a, inv), &[a])
    }

    /// Scales each last-axis row to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let last = *t.shape().last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        let mut inv = Vec::with_capacity(data.len() / last.max(1));
        for row in data.chunks_mut(last.max(1)) {
            let norm = kernels::dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Degenerate("zero-norm feature vector".into()));
            }
            let s = 1.0 / norm;
            for x in row.iter_mut() {
                *x *= s;
            }
            inv.push(s);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.push(out, Op::L2Normalize(a, inv), &[a]))
    }

    /// `ln(max(a, LOG_EPS))`.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(LOG_EPS).ln());
        self.push(out, Op::Log(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return shape_err(format!("sum_axis {axis} invalid for {:?}", t.shape()));
        }
        let extent = t.shape()[axis];
        let (outer, inner) = split_strides(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        let src = t.data();
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let extent = self.shape(a).get(axis).copied().unwrap_or(1).max(1);
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / extent as f64))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let out = self.value(a).index_select(axis, indices)?;
        Ok(self.push(out, Op::IndexSelect(a, axis, indices.to_vec()), &[a]))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.shape()[1..] != tail[..] {
                return shape_err(format!("concat: {:?} vs trailing {tail:?}", t.shape()));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// Looks up rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return shape_err("embedding table must be 2-d");
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!("token id {id} outside table of {rows}")));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push(out, Op::Embedding(table, ids.to_vec()), &[table]))
    }

    /// Bilinear resize of a `[h, w, c]` map (half-pixel centres, edge clamp).
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 3 || out_h == 0 || out_w == 0 {
            return shape_err(format!("upsample expects [h, w, c], got {:?}", t.shape()));
        }
        let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let rows = kernels::bilinear_taps(h, out_h);
        let cols = kernels::bilinear_taps(w, out_w);
        let src = t.data();
        let mut data = vec![0.0; out_h * out_w * c];
        for (y, ry) in rows.iter().enumerate() {
            for (x, cx) in cols.iter().enumerate() {
                let dst = &mut data[(y * out_w + x) * c..(y * out_w + x + 1) * c];
                let corners = [
                    (ry.lo, cx.lo, (1.0 - ry.frac) * (1.0 - cx.frac)),
                    (ry.lo, cx.hi, (1.0 - ry.frac) * cx.frac),
                    (ry.hi, cx.lo, ry.frac * (1.0 - cx.frac)),
                    (ry.hi, cx.hi, ry.frac * cx.frac),
                ];
                for (sy, sx, wgt) in corners {
                    let s = &src[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += wgt * v;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![out_h, out_w, c], data);
        Ok(self.push(out, Op::Upsample { a, rows, cols }, &[a]))
    }

    /// `-weight · Σ ln(max(p[label], LOG_EPS))` over rows of a `[.., C]`
    /// probability tensor. Rows labelled [`IGNORE`] contribute nothing.
    pub fn nll(&mut self, probs: Var, labels: &[u32], weight: f64) -> Result<Var> {
        let t = self.value(probs);
        let c = *t.shape().last().unwrap_or(&0);
        if c == 0 || t.len() / c != labels.len() {
            return shape_err(format!(
                "nll: {} labels for probabilities of shape {:?}",
                labels.len(),
                t.shape()
            ));
        }
        let mut loss = 0.0;
        for (row, &l) in t.data().chunks(c).zip(labels) {
            if l == IGNORE {
                continue;
            }
            let l = l as usize;
            if l >= c {
                return Err(Error::Contract(format!("label {l} outside {c} classes")));
            }
            loss -= row[l].max(LOG_EPS).ln();
        }
        let out = Tensor::scalar(weight * loss);
        let op = Op::Nll {
            probs,
            labels: labels.to_vec(),
            weight,
        };
        Ok(self.push(out, op, &[probs]))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Contract("backward on a no-grad graph".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        grads[root.0] = Some(Tensor::full(&root_shape, 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Folds a full-size gradient onto a suffix-broadcast operand.
    fn reduce_to(&self, g: &[f64], target: Var) -> Tensor {
        let shape = self.shape(target).to_vec();
        let n = self.value(target).len().max(1);
        let mut out = vec![0.0; n];
        for chunk in g.chunks(n) {
            for (o, x) in out.iter_mut().zip(chunk) {
                *o += x;
            }
        }
        Tensor::from_parts(shape, out)
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, self.reduce_to(gd, *b));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    Self::accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bl = bv.len().max(1);
                if self.wants(*a) {
                    let data = gd
                        .chunks(bl)
                        .flat_map(|c| c.iter().zip(bv.data()).map(|(x, y)| x * y))
                        .collect();
                    Self::accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
                }
                if self.wants(*b) {
                    let prod: Vec<f64> = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    Self::accumulate(grads, *b, self.reduce_to(&prod, *b));
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, g.map(|x| x * c));
                }
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if *batch == 0 {
                    let rows = ad.len() / k.max(1);
                    if self.wants(*a) {
                        let mut da = vec![0.0; rows * k];
                        if *trans_b {
                            kernels::gemm_nn(gd, bd, &mut da, rows, n, k);
                        } else {
                            kernels::gemm_nt(gd, bd, &mut da, rows, n, k);
                        }
                        Self::accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), da));
                    }
                    if self.wants(*b) {
                        let mut db = vec![0.0; k * n];
                        if *trans_b {
                            kernels::gemm_tn(gd, ad, &mut db, n, rows, k);
                        } else {
                            kernels::gemm_tn(ad, gd, &mut db, k, rows, n);
                        }
                        Self::accumulate(grads, *b, Tensor::from_parts(self.shape(*b).to_vec(), db));
                    }
                } else {
                    let batch = *batch;
                    if self.wants(*a) {
                        let mut da = vec![0.0; batch * m * k];
                        for s in 0..batch {
                            let g_s = &gd[s * m * n..(s + 1) * m * n];
                            let b_s = &bd[s * k * n..(s + 1) * k * n];
                            let d_s = &mut da[s * m * k..(s + 1) * m * k];
                            if *trans_b {
                                kernels::gemm_nn(g_s, b_s, d_s, m, n, k);
                            } else {
                                kernels::gemm_nt(g_s, b_s, d_s, m, n, k);
                            }
                        }
                        Self::accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), da));
                    }
                    if self.wants(*b) {
                        let mut db = vec![0.0; batch * k * n];
                        for s in 0..batch {
                            let g_s = &gd[s * m * n..(s + 1) * m * n];
                            let a_s = &ad[s * m * k..(s + 1) * m * k];
                            let d_s = &mut db[s * k * n..(s + 1) * k * n];
                            if *trans_b {
                                kernels::gemm_tn(g_s, a_s, d_s, n, m, k);
                            } else {
                                kernels::gemm_tn(a_s, g_s, d_s, k, m, n);
                            }
                        }
                        Self::accumulate(grads, *b, Tensor::from_parts(self.shape(*b).to_vec(), db));
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let data = gd
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| g * kernels::gelu_grad(x))
                        .collect();
                    Self::accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let c = *y.shape().last().unwrap_or(&1);
                    let mut data = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks(c).zip(gd.chunks(c)) {
                        let s = kernels::dot(yr, gr);
                        data.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - s)));
                    }
                    Self::accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), data));
                }
            }
            Op::LayerNorm(a, inv) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let c = *y.shape().last().unwrap_or(&1);
                    let cf = c as f64;
                    let mut data = Vec::with_capacity(y.len());
                    for ((yr, gr), s) in y.data().chunks(c).zip(gd.chunks(c)).zip(inv) {
                        let mg = gr.iter().sum::<f64>() / cf;
                        let mgy = kernels::dot(yr, gr) / cf;
                        data.extend(yr.iter().zip(gr).map(|(y, g)| s * (g - mg - y * mgy)));
                    }
                    Self::accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), data));
                }
            }
            Op::L2Normalize(a, inv) => {
                if self.wants(*a) {
                    let y = &node.value;
                    let c = *y.shape().last().unwrap_or(&1);
                    let mut data = Vec::with_capacity(y.len());
                    for ((yr, gr), s) in y.data().chunks(c).zip(gd.chunks(c)).zip(inv) {
                        let p = kernels::dot(yr, gr);
                        data.extend(yr.iter().zip(gr).map(|(y, g)| s * (g - y * p)));
                    }
                    Self::accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), data));
                }
            }
            Op::Log(a) => {
                if self.wants(*a) {
                    let x = self.value(*a);
                    let data = gd
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > LOG_EPS { g / x } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    Self::accumulate(grads, *a, Tensor::full(self.shape(*a), gd[0]));
                }
            }
            Op::SumAxis(a, axis) => {
                if self.wants(*a) {
                    let shape = self.shape(*a).to_vec();
                    let extent = shape[*axis];
                    let (outer, inner) = split_strides(&shape, *axis);
                    let mut data = Vec::with_capacity(outer * extent * inner);
                    for o in 0..outer {
                        for _ in 0..extent {
                            data.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                        }
                    }
                    Self::accumulate(grads, *a, Tensor::from_parts(shape, data));
                }
            }
            Op::Permute(a, perm) => {
                if self.wants(*a) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    Self::accumulate(grads, *a, permute_raw(g, &inverse));
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    let t = Tensor::from_parts(self.shape(*a).to_vec(), gd.to_vec());
                    Self::accumulate(grads, *a, t);
                }
            }
            Op::IndexSelect(a, axis, indices) => {
                if self.wants(*a) {
                    let shape = self.shape(*a).to_vec();
                    let extent = shape[*axis];
                    let (outer, inner) = split_strides(&shape, *axis);
                    let mut data = vec![0.0; outer * extent * inner];
                    let k = indices.len();
                    for o in 0..outer {
                        for (j, &i) in indices.iter().enumerate() {
                            let src = &gd[(o * k + j) * inner..(o * k + j + 1) * inner];
                            let dst = &mut data[(o * extent + i) * inner..(o * extent + i + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    Self::accumulate(grads, *a, Tensor::from_parts(shape, data));
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        let t = Tensor::from_parts(self.shape(p).to_vec(), gd[off..off + len].to_vec());
                        Self::accumulate(grads, p, t);
                    }
                    off += len;
                }
            }
            Op::Embedding(table, ids) => {
                if self.wants(*table) {
                    let shape = self.shape(*table).to_vec();
                    let d = shape[1];
                    let mut data = vec![0.0; shape[0] * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for (t, s) in data[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                            *t += s;
                        }
                    }
                    Self::accumulate(grads, *table, Tensor::from_parts(shape, data));
                }
            }
            Op::Upsample { a, rows, cols } => {
                if self.wants(*a) {
                    let shape = self.shape(*a).to_vec();
                    let (w, c) = (shape[1], shape[2]);
                    let out_w = cols.len();
                    let mut data = vec![0.0; shape.iter().product()];
                    for (y, ry) in rows.iter().enumerate() {
                        for (x, cx) in cols.iter().enumerate() {
                            let src = &gd[(y * out_w + x) * c..(y * out_w + x + 1) * c];
                            let corners = [
                                (ry.lo, cx.lo, (1.0 - ry.frac) * (1.0 - cx.frac)),
                                (ry.lo, cx.hi, (1.0 - ry.frac) * cx.frac),
                                (ry.hi, cx.lo, ry.frac * (1.0 - cx.frac)),
                                (ry.hi, cx.hi, ry.frac * cx.frac),
                            ];
                            for (sy, sx, wgt) in corners {
                                let dst = &mut data[(sy * w + sx) * c..(sy * w + sx + 1) * c];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wgt * s;
                                }
                            }
                        }
                    }
                    Self::accumulate(grads, *a, Tensor::from_parts(shape, data));
                }
            }
            Op::Nll { probs, labels, weight } => {
                if self.wants(*probs) {
                    let p = self.value(*probs);
                    let c = *p.shape().last().unwrap();
                    let mut data = vec![0.0; p.len()];
                    for (r, &l) in labels.iter().enumerate() {
                        if l == IGNORE {
                            continue;
                        }
                        let idx = r * c + l as usize;
                        let pv = p.data()[idx];
                        if pv > LOG_EPS {
                            data[idx] = -gd[0] * weight / pv;
                        }
                    }
                    Self::accumulate(grads, *probs, Tensor::from_parts(p.shape().to_vec(), data));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), true);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn independent_leaf_gets_zero_or_nothing() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        let u = g.leaf(Tensor::vector(vec![5.0, 5.0]), true);
        let frozen = g.leaf(Tensor::vector(vec![1.0, 1.0]), false);
        let p = g.mul(w, frozen).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(u).map_or(true, |t| t.max_abs() == 0.0));
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_prob_minus_onehot() {
        let mut g = Graph::new();
        let logits = g.leaf(
            Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.5]).unwrap(),
            true,
        );
        let p = g.softmax(logits);
        let loss = g.nll(p, &[2, 0], 1.0).unwrap();
        let grads = g.backward(loss).unwrap();
        let probs = g.value(p).clone();
        let mut want = probs.data().to_vec();
        want[2] -= 1.0;
        want[3] -= 1.0;
        let got = grads.get(logits).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn no_grad_graph_refuses_backward() {
        let mut g = Graph::no_grad();
        let w = g.leaf(Tensor::scalar(2.0), true);
        assert!(!g.requires_grad(w));
        let s = g.sum(w);
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3, 4]));
        let w = g.constant(Tensor::zeros(&[5, 4]));
        let y = g.matmul(a, w, true).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 5]);
        let bad = g.constant(Tensor::zeros(&[3, 5]));
        assert!(g.matmul(a, bad, false).is_err());
        let b = g.constant(Tensor::zeros(&[2, 4, 6]));
        let z = g.matmul(a, b, false).unwrap();
        assert_eq!(g.shape(z), &[2, 3, 6]);
    }
}
