//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes that do not
//! depend on a trainable parameter or a differentiable input are marked as not
//! requiring gradients, so `backward` never visits frozen sub-graphs.

use std::collections::HashMap;

use super::kernels::{gemm, View, ViewMut};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Tokens { patches: Var, cls: Var, pos: Var },
    ScaleSamples { x: Var, scale: Vec<f64> },
    FirstTokens { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, smoothing: f64, probs: Vec<f64> },
    WeightedSum { x: Var, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A differentiable leaf; its gradient is reported by [`Gradients::of`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), p.trainable, Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            View::dense(self.value(a).data(), m, k),
            View::dense(self.value(b).data(), k, n),
            0.0,
            ViewMut::dense(&mut out, m, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `x @ w + b` applied to the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w).shape();
        if ws.len() != 2 || xs.cols() != ws[0] {
            return Err(Error::Dimension(format!("linear {:?} x {ws:?}", xs.shape())));
        }
        let (n, fin, fout) = (xs.rows(), ws[0], ws[1]);
        let mut out = vec![0.0; n * fout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != fout {
                return Err(Error::Dimension(format!("bias of length {} for {fout} outputs", bias.len())));
            }
            for row in out.chunks_exact_mut(fout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(
            1.0,
            View::dense(xs.data(), n, fin),
            View::dense(self.value(w).data(), fin, fout),
            if b.is_some() { 1.0 } else { 0.0 },
            ViewMut::dense(&mut out, n, fout),
        );
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = fout;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::Dimension(format!("add {:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, rg, Op::Gelu(x))
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c {
            return Err(Error::Dimension(format!(
                "layernorm affine of length {}/{} over last axis {c}",
                g.len(),
                b.len()
            )));
        }
        let rows = t.rows();
        let mut xhat = vec![0.0; rows * c];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, rg, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::Input(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Softmax { x, outer, len, inner }))
    }

    /// Multi-head scaled dot-product attention over `[batch, L, d]` inputs.
    /// Returns the concatenated head outputs `[batch, L, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let shape = self.value(q).shape().to_vec();
        if shape.len() != 3 || self.value(k).shape() != shape || self.value(v).shape() != shape {
            return Err(Error::Dimension(format!("attention expects equal [b, L, d] inputs, got {shape:?}")));
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("{heads} heads do not divide width {d}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * heads * l * l];
        let mut out = vec![0.0; b * l * d];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for bi in 0..b {
                for hi in 0..heads {
                    let off = bi * l * d + hi * dh;
                    let pv = View { data: qd, offset: off, rows: l, cols: dh, rs: d, cs: 1 };
                    let kv = View { data: kd, offset: off, rows: l, cols: dh, rs: d, cs: 1 };
                    let p0 = (bi * heads + hi) * l * l;
                    let p = &mut probs[p0..p0 + l * l];
                    gemm(scale, pv, kv.t(), 0.0, ViewMut::dense(p, l, l));
                    softmax_rows_in_place(p, l);
                    let vv = View { data: vd, offset: off, rows: l, cols: dh, rs: d, cs: 1 };
                    gemm(
                        1.0,
                        View::dense(p, l, l),
                        vv,
                        0.0,
                        ViewMut { data: &mut out, offset: off, rows: l, cols: dh, rs: d, cs: 1 },
                    );
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Attention { q, k, v, heads, probs }))
    }

    /// Attention probabilities `[batch, heads, L, L]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Builds `[batch, L, d]` token sequences: a shared leading token `cls`
    /// followed by the patch embeddings, plus positional encodings `pos`.
    pub fn tokens(&mut self, patches: Var, cls: Var, pos: Var) -> Result<Var> {
        let ps = self.value(patches).shape().to_vec();
        if ps.len() != 3 {
            return Err(Error::Dimension(format!("patch embeddings must be [b, n, d], got {ps:?}")));
        }
        let (b, n, d) = (ps[0], ps[1], ps[2]);
        let l = n + 1;
        let (c, p) = (self.value(cls).data(), self.value(pos).data());
        if c.len() != d || p.len() != l * d {
            return Err(Error::Dimension(format!(
                "class token of length {} and positions of length {} for L={l}, d={d}",
                c.len(),
                p.len()
            )));
        }
        let src = self.value(patches).data();
        let mut out = vec![0.0; b * l * d];
        for bi in 0..b {
            for t in 0..l {
                let dst = &mut out[(bi * l + t) * d..(bi * l + t + 1) * d];
                let base = if t == 0 { c } else { &src[(bi * n + t - 1) * d..(bi * n + t) * d] };
                for j in 0..d {
                    dst[j] = base[j] + p[t * d + j];
                }
            }
        }
        let rg = self.rg(patches) || self.rg(cls) || self.rg(pos);
        Ok(self.push(Tensor::new(&[b, l, d], out)?, rg, Op::Tokens { patches, cls, pos }))
    }

    /// Multiplies every row of sample `i` (leading axis) by `scale[i]`.
    pub fn scale_samples(&mut self, x: Var, scale: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        let b = t.shape()[0];
        if scale.len() != b {
            return Err(Error::Dimension(format!("{} scales for batch {b}", scale.len())));
        }
        let per = t.len() / b.max(1);
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * scale[i / per])
            .collect();
        let out = Tensor::new(t.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::ScaleSamples { x, scale }))
    }

    /// Token 0 of every sequence: `[b, L, d] -> [b, d]`.
    pub fn first_tokens(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("expected [b, L, d], got {s:?}")));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * d);
        for bi in 0..b {
            out.extend_from_slice(&t.data()[bi * l * d..bi * l * d + d]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[b, d], out)?, rg, Op::FirstTokens { x }))
    }

    /// Mean label-smoothed cross-entropy of `[B, C]` logits.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Input(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let t = self.value(logits);
        let (b, c) = (t.rows(), t.cols());
        if labels.len() != b {
            return Err(Error::Input(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let logp = row[j] - lse;
                probs[r * c + j] = logp.exp();
                let q = smoothing / c as f64 + if j == y { 1.0 - smoothing } else { 0.0 };
                if q > 0.0 {
                    loss -= q * logp;
                }
            }
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy { logits, labels: labels.to_vec(), smoothing, probs },
        ))
    }

    /// `sum(x * weights)` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.len() {
            return Err(Error::Dimension(format!("{} weights for {} values", weights.len(), t.len())));
        }
        let s = t.data().iter().zip(&weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::WeightedSum { x, weights }))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Dimension(format!("backward from non-scalar {:?}", lv.shape())));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients::collect(self, grads));
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients::collect(self, grads))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let buf = slot(grads, *a, m * k);
                    gemm(1.0, View::dense(g, m, n), View::dense(tb.data(), k, n).t(), 1.0, ViewMut::dense(buf, m, k));
                }
                if self.rg(*b) {
                    let buf = slot(grads, *b, k * n);
                    gemm(1.0, View::dense(ta.data(), m, k).t(), View::dense(g, m, n), 1.0, ViewMut::dense(buf, k, n));
                }
            }
            Op::Linear { x, w, b } => {
                let tx = self.value(*x);
                let tw = self.value(*w);
                let (n, fin, fout) = (tx.rows(), tw.shape()[0], tw.shape()[1]);
                if self.rg(*x) {
                    let buf = slot(grads, *x, n * fin);
                    gemm(1.0, View::dense(g, n, fout), View::dense(tw.data(), fin, fout).t(), 1.0, ViewMut::dense(buf, n, fin));
                }
                if self.rg(*w) {
                    let buf = slot(grads, *w, fin * fout);
                    gemm(1.0, View::dense(tx.data(), n, fin).t(), View::dense(g, n, fout), 1.0, ViewMut::dense(buf, fin, fout));
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let buf = slot(grads, *b, fout);
                        for row in g.chunks_exact(fout) {
                            for (acc, v) in buf.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let buf = slot(grads, v, g.len());
                        for (acc, x) in buf.iter_mut().zip(g) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                let buf = slot(grads, *x, g.len());
                for ((acc, &v), &gy) in buf.iter_mut().zip(xs).zip(g) {
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    *acc += gy * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).len();
                let rows = rstd.len();
                if self.rg(*gamma) {
                    let buf = slot(grads, *gamma, c);
                    for r in 0..rows {
                        for j in 0..c {
                            buf[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let buf = slot(grads, *beta, c);
                    for r in 0..rows {
                        for j in 0..c {
                            buf[j] += g[r * c + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma).data().to_vec();
                    let buf = slot(grads, *x, rows * c);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[r * c + j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            buf[r * c + j] += rstd[r] * (dxhat[j] - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let buf = slot(grads, *x, y.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            buf[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let shape = self.value(*q).shape();
                let (b, l, d) = (shape[0], shape[1], shape[2]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; b * l * d];
                let mut dk = vec![0.0; b * l * d];
                let mut dv = vec![0.0; b * l * d];
                let mut dp = vec![0.0; l * l];
                for bi in 0..b {
                    for hi in 0..*heads {
                        let off = bi * l * d + hi * dh;
                        let strided = |data| View { data, offset: off, rows: l, cols: dh, rs: d, cs: 1 };
                        let p0 = (bi * heads + hi) * l * l;
                        let p = &probs[p0..p0 + l * l];
                        // dP = dO V^T, dV += P^T dO
                        gemm(1.0, strided(g), strided(vd).t(), 0.0, ViewMut::dense(&mut dp, l, l));
                        gemm(
                            1.0,
                            View::dense(p, l, l).t(),
                            strided(g),
                            1.0,
                            ViewMut { data: &mut dv, offset: off, rows: l, cols: dh, rs: d, cs: 1 },
                        );
                        // dS = P * (dP - rowsum(dP * P)), scaled
                        for r in 0..l {
                            let row = &mut dp[r * l..(r + 1) * l];
                            let pr = &p[r * l..(r + 1) * l];
                            let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                            for (x, &pp) in row.iter_mut().zip(pr) {
                                *x = pp * (*x - dot) * scale;
                            }
                        }
                        gemm(
                            1.0,
                            View::dense(&dp, l, l),
                            strided(kd),
                            1.0,
                            ViewMut { data: &mut dq, offset: off, rows: l, cols: dh, rs: d, cs: 1 },
                        );
                        gemm(
                            1.0,
                            View::dense(&dp, l, l).t(),
                            strided(qd),
                            1.0,
                            ViewMut { data: &mut dk, offset: off, rows: l, cols: dh, rs: d, cs: 1 },
                        );
                    }
                }
                for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.rg(var) {
                        let buf = slot(grads, var, local.len());
                        for (acc, x) in buf.iter_mut().zip(&local) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::Tokens { patches, cls, pos } => {
                let s = node.value.shape();
                let (b, l, d) = (s[0], s[1], s[2]);
                let n = l - 1;
                if self.rg(*patches) {
                    let buf = slot(grads, *patches, b * n * d);
                    for bi in 0..b {
                        for t in 1..l {
                            let src = &g[(bi * l + t) * d..(bi * l + t + 1) * d];
                            let dst = &mut buf[(bi * n + t - 1) * d..(bi * n + t) * d];
                            for (a, x) in dst.iter_mut().zip(src) {
                                *a += x;
                            }
                        }
                    }
                }
                if self.rg(*cls) {
                    let buf = slot(grads, *cls, d);
                    for bi in 0..b {
                        for j in 0..d {
                            buf[j] += g[bi * l * d + j];
                        }
                    }
                }
                if self.rg(*pos) {
                    let buf = slot(grads, *pos, l * d);
                    for bi in 0..b {
                        for (a, x) in buf.iter_mut().zip(&g[bi * l * d..(bi + 1) * l * d]) {
                            *a += x;
                        }
                    }
                }
            }
            Op::ScaleSamples { x, scale } => {
                let per = g.len() / scale.len().max(1);
                let buf = slot(grads, *x, g.len());
                for (i, (a, x)) in buf.iter_mut().zip(g).enumerate() {
                    *a += x * scale[i / per];
                }
            }
            Op::FirstTokens { x } => {
                let s = self.value(*x).shape();
                let (b, l, d) = (s[0], s[1], s[2]);
                let buf = slot(grads, *x, b * l * d);
                for bi in 0..b {
                    for j in 0..d {
                        buf[bi * l * d + j] += g[bi * d + j];
                    }
                }
            }
            Op::CrossEntropy { logits, labels, smoothing, probs } => {
                let c = self.value(*logits).cols();
                let b = labels.len();
                let buf = slot(grads, *logits, b * c);
                let scale = g[0] / b as f64;
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let q = smoothing / c as f64 + if j == y { 1.0 - smoothing } else { 0.0 };
                        buf[r * c + j] += scale * (probs[r * c + j] - q);
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                let buf = slot(grads, *x, weights.len());
                for (a, w) in buf.iter_mut().zip(weights) {
                    *a += g[0] * w;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

pub(crate) fn softmax_rows_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    fn collect(tape: &Tape, nodes: Vec<Option<Vec<f64>>>) -> Self {
        let mut params: Vec<(ParamId, usize)> = tape
            .param_vars
            .iter()
            .filter(|(_, v)| nodes[v.0].is_some())
            .map(|(id, v)| (*id, v.0))
            .collect();
        params.sort();
        Self { nodes, params }
    }

    #[cfg(test)]
    pub(crate) fn from_raw(raw: Vec<(ParamId, Vec<f64>)>) -> Self {
        let params = raw.iter().enumerate().map(|(i, (id, _))| (*id, i)).collect();
        let nodes = raw.into_iter().map(|(_, g)| Some(g)).collect();
        Self { nodes, params }
    }

    /// Gradient of a differentiable node, if any flowed into it.
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .binary_search_by_key(&id, |(p, _)| *p)
            .ok()
            .and_then(|i| self.nodes[self.params[i].1].as_deref())
    }

    /// Parameters that received a gradient, in id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .map(|(id, n)| (*id, self.nodes[*n].as_deref().expect("collected")))
    }
}
