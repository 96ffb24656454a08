//! Reverse-mode differentiation over an explicitly built per-step graph.
//!
//! Nodes are appended in evaluation order, so every node's inputs have smaller
//! indices and a single reverse sweep visits nodes in topological order.
//! Parameter leaves borrow their values from the [`ParamStore`]; a leaf created
//! by [`Graph::constant`] or [`Graph::detach`] never receives gradient.

use super::matrix::{dot, Mat, Scalar};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys each query row may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    Full,
    /// Row `i` sees keys `0..=i` (square attention only).
    Causal,
    Custom { rows: usize, cols: usize, allowed: Vec<bool> },
}

impl Mask {
    pub fn custom(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Mask::Custom { rows, cols, allowed }
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match self {
            Mask::Full => true,
            Mask::Causal => j <= i,
            Mask::Custom { cols, allowed, .. } => allowed[i * cols + j],
        }
    }

    /// Upper bound (exclusive) on the key index row `i` can reach.
    #[inline]
    fn key_end(&self, i: usize, lk: usize) -> usize {
        match self {
            Mask::Causal => (i + 1).min(lk),
            _ => lk,
        }
    }

    pub fn validate(&self, lq: usize, lk: usize) -> Result<()> {
        match self {
            Mask::Full => {
                if lk == 0 && lq > 0 {
                    return Err(Error::EmptyMaskRow(0));
                }
            }
            Mask::Causal => {
                if lq != lk {
                    return Err(Error::Shape(format!("causal mask needs square attention, got {lq}x{lk}")));
                }
            }
            Mask::Custom { rows, cols, .. } => {
                if *rows != lq || *cols != lk {
                    return Err(Error::Shape(format!("mask is {rows}x{cols}, attention is {lq}x{lk}")));
                }
                for i in 0..lq {
                    if !(0..lk).any(|j| self.allows(i, j)) {
                        return Err(Error::EmptyMaskRow(i));
                    }
                }
            }
        }
        Ok(())
    }
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat<T>, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: Mask, probs: Vec<f64> },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
}

struct Node<T: Scalar> {
    value: Option<Mat<T>>,
    op: Op<T>,
    needs_grad: bool,
    /// Full-precision value of scalar reductions.
    scalar: Option<f64>,
}

/// Gradients for every parameter group reached by one backward pass.
#[derive(Clone, Debug)]
pub struct GradientReport<T: Scalar = f32> {
    grads: Vec<Option<Mat<T>>>,
    pub loss: f64,
    pub step: u64,
    pub valid: bool,
}

impl<T: Scalar> GradientReport<T> {
    pub fn empty(groups: usize) -> Self {
        Self { grads: vec![None; groups], loss: 0.0, step: 0, valid: true }
    }

    pub fn grad(&self, id: ParamId) -> Option<&Mat<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn grad_or_zeros(&self, id: ParamId, store: &ParamStore<T>) -> Mat<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = store.get(id).shape();
                Mat::zeros(r, c)
            }
        }
    }

    pub fn groups(&self) -> usize {
        self.grads.len()
    }

    fn add_param(&mut self, id: ParamId, g: Mat<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds another report into this one (same store layout).
    pub fn accumulate(&mut self, other: &GradientReport<T>) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
        self.loss += other.loss;
        self.valid &= other.valid;
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
        self.loss *= s;
    }

    /// True when no group received a nonzero entry.
    pub fn is_all_zero(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.data().iter().all(|x| x.to_f64() == 0.0))
    }

    pub fn check_finite(&mut self) -> bool {
        let ok = self.loss.is_finite() && self.grads.iter().flatten().all(|g| g.is_finite());
        self.valid &= ok;
        ok
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.data().iter()).map(|x| x.to_f64() * x.to_f64()).sum::<f64>().sqrt()
    }
}

pub struct Graph<'a, T: Scalar = f32> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store, nodes: Vec::with_capacity(256), backward_done: false }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad, scalar: None });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat<T> {
        let n = &self.nodes[v.0];
        match (&n.op, &n.value) {
            (Op::Param(id), _) => self.store.get(*id),
            (_, Some(m)) => m,
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value at full precision when the node is a reduction.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.scalar.unwrap_or_else(|| self.value(v).get(0, 0).to_f64())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.store.is_trainable(id);
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: trainable, scalar: None });
        Var(self.nodes.len() - 1)
    }

    /// Same forward value; no gradient crosses this node.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.push(m, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `x · w + b` with `b` a 1×out row.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).matmul(self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, out.cols()), "bias shape");
            for r in 0..out.rows() {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o = T::from_f64(o.to_f64() + bb.to_f64());
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear(x, w, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| T::from_f64(x.to_f64() + y.to_f64()));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| T::from_f64(x.to_f64() - y.to_f64()));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| T::from_f64(x.to_f64() * y.to_f64()));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a 1×C row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        let av = self.value(a);
        assert_eq!(r.shape(), (1, av.cols()), "add_row expects a 1xC row");
        let mut out = av.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o = T::from_f64(o.to_f64() + b.to_f64());
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// `s · a + c`.
    pub fn affine(&mut self, a: Var, s: f64, c: f64) -> Var {
        let out = self.value(a).map(|x| T::from_f64(x.to_f64() * s + c));
        let ng = self.ng(a);
        self.push(out, Op::Affine(a, s), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| {
            let x = x.to_f64();
            T::from_f64(0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
        });
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x.to_f64() > 0.0 { x } else { T::default() });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::from_f64(sigmoid(x.to_f64())));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::from_f64(x.to_f64().tanh()));
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Row-wise normalization with 1×C gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain);
        let b = self.value(bias);
        assert_eq!(g.shape(), (1, cols), "layer_norm gain shape");
        assert_eq!(b.shape(), (1, cols), "layer_norm bias shape");
        let mut xhat = Mat::zeros(rows, cols);
        let mut out = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c].to_f64() - mean) * rs;
                xhat.set(r, c, T::from_f64(h));
                out.set(r, c, T::from_f64(h * g.data()[c].to_f64() + b.data()[c].to_f64()));
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng)
    }

    /// Scaled dot-product attention over `heads` equal column blocks of
    /// pre-projected `q` (Lq×D), `k` and `v` (Lk×D).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Mask) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads, &mask);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, heads, mask, probs }, ng)
    }

    /// Attention weights of head `h` for query row `i` (diagnostics and tests).
    pub fn attention_probs(&self, node: Var, h: usize, i: usize) -> Option<Vec<f64>> {
        match &self.nodes[node.0].op {
            Op::Attention { k, probs, q, .. } => {
                let lq = self.value(*q).rows();
                let lk = self.value(*k).rows();
                let base = (h * lq + i) * lk;
                Some(probs[base..base + lk].to_vec())
            }
            _ => None,
        }
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice_rows(start, end);
        let ng = self.ng(x);
        self.push(out, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::concat_rows(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Embedding lookup: output row `r` is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let rows: Vec<&[T]> = ids.iter().map(|&i| t.row(i)).collect();
        let out = Mat::from_rows(&rows);
        let ng = self.ng(table);
        self.push(out, Op::GatherRows { table, ids: ids.to_vec() }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        let v = self.push(Mat::filled(1, 1, T::from_f64(s)), Op::Sum(a), ng);
        self.nodes[v.0].scalar = Some(s);
        v
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let s = m.sum() / m.len() as f64;
        let ng = self.ng(a);
        let v = self.push(Mat::filled(1, 1, T::from_f64(s)), Op::Mean(a), ng);
        self.nodes[v.0].scalar = Some(s);
        v
    }

    /// `mean((a - b)^2)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse sweep from a 1×1 `loss`. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<GradientReport<T>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss(r, c));
        }
        let loss_value = self.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss(loss_value));
        }
        self.backward_done = true;

        let mut report = GradientReport::empty(self.store.len());
        report.loss = loss_value;
        let mut grads: Vec<Option<Mat<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, T::from_f64(1.0)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads, &mut report);
        }
        report.check_finite();
        Ok(report)
    }

    fn backprop_node(&self, i: usize, g: Mat<T>, grads: &mut [Option<Mat<T>>], report: &mut GradientReport<T>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => report.add_param(*id, g),
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    let ga = g.matmul_nt(self.value(*b));
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = self.value(*a).matmul_tn(&g);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Linear(x, w, b) => {
                if self.ng(*x) {
                    let gx = g.matmul_nt(self.value(*w));
                    self.acc(grads, *x, gx);
                }
                if self.ng(*w) {
                    let gw = self.value(*x).matmul_tn(&g);
                    self.acc(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        self.acc(grads, *b, col_sums(&g));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.clone());
                }
                if self.ng(*a) {
                    self.acc(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, g.map(|x| T::from_f64(-x.to_f64())));
                }
                if self.ng(*a) {
                    self.acc(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| T::from_f64(x.to_f64() * y.to_f64()));
                    self.acc(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| T::from_f64(x.to_f64() * y.to_f64()));
                    self.acc(grads, *b, gb);
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    self.acc(grads, *row, col_sums(&g));
                }
                if self.ng(*a) {
                    self.acc(grads, *a, g);
                }
            }
            Op::Affine(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|x| T::from_f64(x.to_f64() * s)));
            }
            Op::Gelu(a) => {
                let ga = g.zip_map(self.value(*a), |gy, x| {
                    let x = x.to_f64();
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    T::from_f64(gy.to_f64() * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))
                });
                self.acc(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |gy, x| if x.to_f64() > 0.0 { gy } else { T::default() });
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = node.value.as_ref().expect("value");
                let ga = g.zip_map(y, |gy, y| {
                    let y = y.to_f64();
                    T::from_f64(gy.to_f64() * y * (1.0 - y))
                });
                self.acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let y = node.value.as_ref().expect("value");
                let ga = g.zip_map(y, |gy, y| {
                    let y = y.to_f64();
                    T::from_f64(gy.to_f64() * (1.0 - y * y))
                });
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain);
                let (rows, cols) = xhat.shape();
                if self.ng(*gain) {
                    let mut gg = vec![0f64; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g.get(r, c).to_f64() * xhat.get(r, c).to_f64();
                        }
                    }
                    self.acc(grads, *gain, Mat::from_vec(1, cols, gg.into_iter().map(T::from_f64).collect()));
                }
                if self.ng(*bias) {
                    self.acc(grads, *bias, col_sums(&g));
                }
                if self.ng(*x) {
                    let mut gx = Mat::zeros(rows, cols);
                    let mut dxh = vec![0f64; cols];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let d = g.get(r, c).to_f64() * gv.data()[c].to_f64();
                            dxh[c] = d;
                            m1 += d;
                            m2 += d * xhat.get(r, c).to_f64();
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let v = rstd[r] * (dxh[c] - m1 - xhat.get(r, c).to_f64() * m2);
                            gx.set(r, c, T::from_f64(v));
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::Attention { q, k, v, heads, mask, probs } => {
                let (gq, gk, gv) =
                    attention_backward(self.value(*q), self.value(*k), self.value(*v), *heads, mask, probs, &g);
                if self.ng(*q) {
                    self.acc(grads, *q, gq);
                }
                if self.ng(*k) {
                    self.acc(grads, *k, gk);
                }
                if self.ng(*v) {
                    self.acc(grads, *v, gv);
                }
            }
            Op::SliceRows { x, start } => {
                let (rows, cols) = self.shape(*x);
                let mut gx = Mat::zeros(rows, cols);
                let n = g.rows();
                gx.data_mut()[start * cols..(start + n) * cols].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p).0;
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_rows(offset, offset + n));
                    }
                    offset += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let (rows, cols) = self.shape(*table);
                let mut gt: Mat<T> = Mat::zeros(rows, cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o = T::from_f64(o.to_f64() + x.to_f64());
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Mat::filled(r, c, g.get(0, 0)));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let s = g.get(0, 0).to_f64() / (r * c) as f64;
                self.acc(grads, *a, Mat::filled(r, c, T::from_f64(s)));
            }
        }
    }

    #[inline]
    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn col_sums<T: Scalar>(g: &Mat<T>) -> Mat<T> {
    let mut s = vec![0f64; g.cols()];
    for r in 0..g.rows() {
        for (a, &x) in s.iter_mut().zip(g.row(r)) {
            *a += x.to_f64();
        }
    }
    Mat::from_vec(1, g.cols(), s.into_iter().map(T::from_f64).collect())
}

fn attention_forward<T: Scalar>(q: &Mat<T>, k: &Mat<T>, v: &Mat<T>, heads: usize, mask: &Mask) -> (Mat<T>, Vec<f64>) {
    let (lq, d) = q.shape();
    let lk = k.rows();
    assert_eq!(k.cols(), d, "key width");
    assert_eq!(v.shape(), (lk, d), "value shape");
    assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0f64; heads * lq * lk];
    let mut out = Mat::zeros(lq, d);
    let mut acc = vec![0f64; dh];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..lq {
            let qi = &q.row(i)[cols.clone()];
            let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let end = mask.key_end(i, lk);
            let mut max = f64::NEG_INFINITY;
            for j in 0..end {
                if mask.allows(i, j) {
                    let s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                    p[j] = s;
                    max = max.max(s);
                }
            }
            let mut total = 0.0;
            for j in 0..end {
                if mask.allows(i, j) {
                    let e = (p[j] - max).exp();
                    p[j] = e;
                    total += e;
                } else {
                    p[j] = 0.0;
                }
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for j in 0..end {
                if p[j] != 0.0 {
                    p[j] /= total;
                    let w = p[j];
                    for (a, &x) in acc.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *a += w * x.to_f64();
                    }
                }
            }
            for (o, &a) in out.row_mut(i)[cols.clone()].iter_mut().zip(&acc) {
                *o = T::from_f64(a);
            }
        }
    }
    (out, probs)
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Scalar>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    heads: usize,
    mask: &Mask,
    probs: &[f64],
    g: &Mat<T>,
) -> (Mat<T>, Mat<T>, Mat<T>) {
    let (lq, d) = q.shape();
    let lk = k.rows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0f64; lq * d];
    let mut gk = vec![0f64; lk * d];
    let mut gv = vec![0f64; lk * d];
    let mut dp = vec![0f64; lk];
    for h in 0..heads {
        let c0 = h * dh;
        for i in 0..lq {
            let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let go = &g.row(i)[c0..c0 + dh];
            let end = mask.key_end(i, lk);
            let mut s = 0.0;
            for j in 0..end {
                if p[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &v.row(j)[c0..c0 + dh];
                dp[j] = dot(go, vj);
                s += p[j] * dp[j];
                let gvj = &mut gv[j * d + c0..j * d + c0 + dh];
                for (a, &x) in gvj.iter_mut().zip(go) {
                    *a += p[j] * x.to_f64();
                }
            }
            let qi = &q.row(i)[c0..c0 + dh];
            for j in 0..end {
                if p[j] == 0.0 {
                    continue;
                }
                let ds = p[j] * (dp[j] - s) * scale;
                let kj = &k.row(j)[c0..c0 + dh];
                let gqi = &mut gq[i * d + c0..i * d + c0 + dh];
                for (a, &x) in gqi.iter_mut().zip(kj) {
                    *a += ds * x.to_f64();
                }
                let gkj = &mut gk[j * d + c0..j * d + c0 + dh];
                for (a, &x) in gkj.iter_mut().zip(qi) {
                    *a += ds * x.to_f64();
                }
            }
        }
    }
    let cvt = |buf: Vec<f64>, r: usize| Mat::from_vec(r, d, buf.into_iter().map(T::from_f64).collect());
    (cvt(gq, lq), cvt(gk, lk), cvt(gv, lk))
}
