//! Reverse-mode differentiation over real matrices.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! output value. [`Graph::backward`] walks the record in reverse and returns
//! exact gradients of a scalar node with respect to every node that depends
//! on a parameter leaf.
//!
//! The operation set is deliberately narrow: it is what the feedback pipeline
//! needs (affine layers, saturating activations, complex mixing expressed on
//! interleaved real pairs, power normalizations, the achievable-rate map,
//! quantizer routing and the kernel information estimate). Stop-gradient and
//! straight-through nodes are first-class so the surrogate gradients of the
//! quantizer are explicit in the record.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};
use std::f64::consts::LN_2;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Tanh(Var),
    SumAll(Var),
    Mean(Var),
    RowSqNormMean(Var),
    StopGrad,
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    StraightThrough(Var),
    StraightThroughSelect {
        z: Var,
        q: Var,
    },
    NormalizeComplexColumns {
        x: Var,
        power: f64,
    },
    ConjMatmul {
        a: Var,
        b: Var,
    },
    PowerNormalizeRows {
        x: Var,
        power: f64,
        zero_rows: Vec<usize>,
    },
    Rates {
        v: Var,
        h: Var,
        users: usize,
        noise_var: f64,
    },
    KernelMi {
        q: Var,
        pairs: Vec<(usize, usize)>,
        inv_sigma_sq: f64,
        weights: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A record of one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of the loss with respect to `v`, zero-filled when nothing flowed.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = graph.value(v).shape();
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "node is not a scalar");
        t.data()[0]
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scaled(factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// `x · Wᵀ + b` with `x: [n, in]`, `W: [out, in]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut out = matmul(self.value(x), false, self.value(w), true);
        let bias = self.value(b);
        assert_eq!(bias.shape(), (1, out.cols()), "bias shape mismatch");
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Batch mean of squared row norms, `(1/n) Σ_r ‖x_r‖²`.
    pub fn row_sq_norm_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let total: f64 = t.data().iter().map(|v| v * v).sum();
        let out = Tensor::scalar(total / t.rows() as f64);
        let rg = self.rg(x);
        self.push(out, Op::RowSqNormMean(x), rg)
    }

    /// Value of `x`, derivative zero.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::StopGrad, false)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let out = self.value(x).slice_cols(start, width);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&tensors);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Selects rows of `table` by index; gradients scatter back to the selected rows.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Tensor::zeros(indices.len(), t.cols());
        for (r, &i) in indices.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Straight-through node: forward value is `value`, backward copies the
    /// incoming gradient to `z` unchanged.
    pub fn straight_through(&mut self, z: Var, value: Tensor) -> Var {
        assert_eq!(self.value(z).shape(), value.shape(), "straight-through shape mismatch");
        let rg = self.rg(z);
        self.push(value, Op::StraightThrough(z), rg)
    }

    /// Straight-through node whose value is that of `q`; the incoming gradient
    /// is copied to both `z` and `q`.
    pub fn straight_through_select(&mut self, z: Var, q: Var) -> Var {
        assert_eq!(self.value(z).shape(), self.value(q).shape());
        let out = self.value(q).clone();
        let rg = self.rg(z) || self.rg(q);
        self.push(out, Op::StraightThroughSelect { z, q }, rg)
    }

    /// Scales every complex column of an interleaved `[rows, 2·cols]` matrix to
    /// squared norm `power`. A zero column maps to zero.
    pub fn normalize_complex_columns(&mut self, x: Var, power: f64) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        for c in 0..t.cols() / 2 {
            let n2 = complex_col_sq_norm(t, c);
            let s = if n2 > 0.0 { (power / n2).sqrt() } else { 0.0 };
            for r in 0..t.rows() {
                out.set(r, 2 * c, t.get(r, 2 * c) * s);
                out.set(r, 2 * c + 1, t.get(r, 2 * c + 1) * s);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::NormalizeComplexColumns { x, power }, rg)
    }

    /// Complex product `conj(A) · B` of interleaved matrices
    /// `A: [r, 2c]`, `B: [c, 2d]`, giving `[r, 2d]`.
    pub fn conj_matmul(&mut self, a: Var, b: Var) -> Var {
        let out = conj_matmul_value(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::ConjMatmul { a, b }, rg)
    }

    /// Scales every row to squared norm `power`. All-zero rows stay zero and
    /// are reported by [`Graph::zero_rows`].
    pub fn power_normalize_rows(&mut self, x: Var, power: f64) -> Var {
        let t = self.value(x);
        let mut out = t.clone();
        let mut zero_rows = Vec::new();
        for r in 0..t.rows() {
            let n2: f64 = t.row(r).iter().map(|v| v * v).sum();
            if n2 > 0.0 {
                let s = (power / n2).sqrt();
                out.row_mut(r).iter_mut().for_each(|v| *v *= s);
            } else {
                zero_rows.push(r);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::PowerNormalizeRows { x, power, zero_rows }, rg)
    }

    /// Rows that were all-zero in a [`Graph::power_normalize_rows`] node.
    pub fn zero_rows(&self, v: Var) -> &[usize] {
        match &self.nodes[v.0].op {
            Op::PowerNormalizeRows { zero_rows, .. } => zero_rows,
            _ => &[],
        }
    }

    /// Per-user achievable rates in bits per channel use.
    ///
    /// `v` and `h` are `[S, 2·M·K]` with user `k` occupying the interleaved
    /// slice `2Mk .. 2M(k+1)`. The output is `[S, K]`.
    pub fn rates(&mut self, v: Var, h: Var, users: usize, noise_var: f64) -> Var {
        let out = rates_value(self.value(v), self.value(h), users, noise_var);
        let rg = self.rg(v);
        self.push(out, Op::Rates { v, h, users, noise_var }, rg)
    }

    /// Kernel relaxation of the collision bound over sampled ordered pairs:
    /// `−log( mean_p exp(−‖q_b − q_b'‖² / (2σ²)) )`, evaluated in log-sum-exp form.
    pub fn kernel_mi(&mut self, q: Var, pairs: &[(usize, usize)], sigma: f64) -> Var {
        assert!(!pairs.is_empty(), "kernel estimate needs at least one pair");
        let t = self.value(q);
        let two_sigma_sq = 2.0 * sigma * sigma;
        let exponents: Vec<f64> = pairs
            .iter()
            .map(|&(b, bp)| -sq_dist(t.row(b), t.row(bp)) / two_sigma_sq)
            .collect();
        let max = exponents.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut weights: Vec<f64> = exponents.iter().map(|e| (e - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let lse = max + total.ln();
        let value = (pairs.len() as f64).ln() - lse;
        let rg = self.rg(q);
        self.push(
            Tensor::scalar(value),
            Op::KernelMi {
                q,
                pairs: pairs.to_vec(),
                inv_sigma_sq: 1.0 / (sigma * sigma),
                weights,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape(format!("backward needs a scalar, got {:?}", lv.shape())));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), d));
                }
                if self.rg(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.rows(), g.cols(), d));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.scaled(*f)),
            Op::Linear { x, w, b } => {
                if self.rg(*x) {
                    self.accumulate(grads, *x, matmul(g, false, self.value(*w), false));
                }
                if self.rg(*w) {
                    self.accumulate(grads, *w, matmul(g, true, self.value(*x), false));
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += gv;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.rows(), g.cols(), d));
            }
            Op::SumAll(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(r, c, g.data()[0]));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::full(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::RowSqNormMean(x) => {
                let t = self.value(*x);
                let f = 2.0 * g.data()[0] / t.rows() as f64;
                self.accumulate(grads, *x, t.scaled(f));
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.value(*x).shape();
                let mut d = Tensor::zeros(r, c);
                for row in 0..r {
                    d.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice_cols(offset, w));
                    }
                    offset += w;
                }
            }
            Op::Gather { table, indices } => {
                let (r, c) = self.value(*table).shape();
                let mut d = Tensor::zeros(r, c);
                for (row, &i) in indices.iter().enumerate() {
                    for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(row)) {
                        *dv += gv;
                    }
                }
                self.accumulate(grads, *table, d);
            }
            Op::StraightThrough(z) => self.accumulate(grads, *z, g.clone()),
            Op::StraightThroughSelect { z, q } => {
                self.accumulate(grads, *z, g.clone());
                self.accumulate(grads, *q, g.clone());
            }
            Op::NormalizeComplexColumns { x, power } => {
                let t = self.value(*x);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for c in 0..t.cols() / 2 {
                    let n2 = complex_col_sq_norm(t, c);
                    if n2 == 0.0 {
                        continue;
                    }
                    let s = (power / n2).sqrt();
                    let mut dot = 0.0;
                    for r in 0..t.rows() {
                        dot += t.get(r, 2 * c) * g.get(r, 2 * c) + t.get(r, 2 * c + 1) * g.get(r, 2 * c + 1);
                    }
                    for r in 0..t.rows() {
                        for j in [2 * c, 2 * c + 1] {
                            d.set(r, j, s * (g.get(r, j) - t.get(r, j) * dot / n2));
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConjMatmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, inner, cols) = (ta.rows(), ta.cols() / 2, tb.cols() / 2);
                if self.rg(*a) {
                    let mut d = Tensor::zeros(ta.rows(), ta.cols());
                    for i in 0..rows {
                        for m in 0..inner {
                            let (mut dr, mut di) = (0.0, 0.0);
                            for j in 0..cols {
                                let (gr, gi) = (g.get(i, 2 * j), g.get(i, 2 * j + 1));
                                let (br, bi) = (tb.get(m, 2 * j), tb.get(m, 2 * j + 1));
                                dr += gr * br + gi * bi;
                                di += gr * bi - gi * br;
                            }
                            d.set(i, 2 * m, dr);
                            d.set(i, 2 * m + 1, di);
                        }
                    }
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let mut d = Tensor::zeros(tb.rows(), tb.cols());
                    for i in 0..rows {
                        for m in 0..inner {
                            let (ar, ai) = (ta.get(i, 2 * m), ta.get(i, 2 * m + 1));
                            let drow = d.row_mut(m);
                            for j in 0..cols {
                                let (gr, gi) = (g.get(i, 2 * j), g.get(i, 2 * j + 1));
                                drow[2 * j] += gr * ar - gi * ai;
                                drow[2 * j + 1] += gr * ai + gi * ar;
                            }
                        }
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::PowerNormalizeRows { x, power, .. } => {
                let t = self.value(*x);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    let xr = t.row(r);
                    let n2: f64 = xr.iter().map(|v| v * v).sum();
                    if n2 == 0.0 {
                        continue;
                    }
                    let s = (power / n2).sqrt();
                    let gr = g.row(r);
                    let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, xv), gv) in d.row_mut(r).iter_mut().zip(xr).zip(gr) {
                        *dv = s * (gv - xv * dot / n2);
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Rates { v, h, users, noise_var } => {
                let d = rates_vjp(self.value(*v), self.value(*h), *users, *noise_var, g);
                self.accumulate(grads, *v, d);
            }
            Op::KernelMi {
                q,
                pairs,
                inv_sigma_sq,
                weights,
            } => {
                let t = self.value(*q);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                let gv = g.data()[0];
                for (&(b, bp), w) in pairs.iter().zip(weights) {
                    let f = gv * w * inv_sigma_sq;
                    for j in 0..t.cols() {
                        let diff = t.get(b, j) - t.get(bp, j);
                        d.row_mut(b)[j] += f * diff;
                        d.row_mut(bp)[j] -= f * diff;
                    }
                }
                self.accumulate(grads, *q, d);
            }
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn complex_col_sq_norm(t: &Tensor, c: usize) -> f64 {
    (0..t.rows())
        .map(|r| t.get(r, 2 * c).powi(2) + t.get(r, 2 * c + 1).powi(2))
        .sum()
}

pub(crate) fn conj_matmul_value(ta: &Tensor, tb: &Tensor) -> Tensor {
    assert!(ta.cols().is_multiple_of(2) && tb.cols().is_multiple_of(2));
    let (rows, inner, cols) = (ta.rows(), ta.cols() / 2, tb.cols() / 2);
    assert_eq!(inner, tb.rows(), "complex inner dimension mismatch");
    let mut out = Tensor::zeros(rows, 2 * cols);
    for i in 0..rows {
        let orow = out.row_mut(i);
        for m in 0..inner {
            let (ar, ai) = (ta.get(i, 2 * m), ta.get(i, 2 * m + 1));
            let brow = tb.row(m);
            for j in 0..cols {
                let (br, bi) = (brow[2 * j], brow[2 * j + 1]);
                orow[2 * j] += ar * br + ai * bi;
                orow[2 * j + 1] += ar * bi - ai * br;
            }
        }
    }
    out
}

/// Complex gains `g[k][j] = h_kᴴ v_j` for one sample.
fn cross_gains(v: &[f64], h: &[f64], users: usize, antennas: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); users * users];
    for k in 0..users {
        let hk = &h[2 * antennas * k..2 * antennas * (k + 1)];
        for j in 0..users {
            let vj = &v[2 * antennas * j..2 * antennas * (j + 1)];
            let (mut re, mut im) = (0.0, 0.0);
            for m in 0..antennas {
                let (hr, hi) = (hk[2 * m], hk[2 * m + 1]);
                let (vr, vi) = (vj[2 * m], vj[2 * m + 1]);
                re += hr * vr + hi * vi;
                im += hr * vi - hi * vr;
            }
            out[k * users + j] = (re, im);
        }
    }
    out
}

pub(crate) fn rates_value(v: &Tensor, h: &Tensor, users: usize, noise_var: f64) -> Tensor {
    assert_eq!(v.shape(), h.shape(), "precoder/channel shape mismatch");
    assert_eq!(v.cols() % (2 * users), 0);
    let antennas = v.cols() / (2 * users);
    let mut out = Tensor::zeros(v.rows(), users);
    for s in 0..v.rows() {
        let gains = cross_gains(v.row(s), h.row(s), users, antennas);
        for k in 0..users {
            let mut interference = noise_var;
            let mut signal = 0.0;
            for j in 0..users {
                let (re, im) = gains[k * users + j];
                let p = re * re + im * im;
                if j == k {
                    signal = p;
                } else {
                    interference += p;
                }
            }
            out.set(s, k, (signal / interference).ln_1p() / LN_2);
        }
    }
    out
}

fn rates_vjp(v: &Tensor, h: &Tensor, users: usize, noise_var: f64, g: &Tensor) -> Tensor {
    let antennas = v.cols() / (2 * users);
    let mut d = Tensor::zeros(v.rows(), v.cols());
    for s in 0..v.rows() {
        let (vr, hr) = (v.row(s), h.row(s));
        let gains = cross_gains(vr, hr, users, antennas);
        let drow = d.row_mut(s);
        for k in 0..users {
            let gk = g.get(s, k);
            if gk == 0.0 {
                continue;
            }
            let powers: Vec<f64> = (0..users)
                .map(|j| {
                    let (re, im) = gains[k * users + j];
                    re * re + im * im
                })
                .collect();
            let total = noise_var + powers.iter().sum::<f64>();
            let interference = total - powers[k];
            let hk = &hr[2 * antennas * k..2 * antennas * (k + 1)];
            for j in 0..users {
                // dR_k / d|g_kj|²
                let dp = if j == k {
                    1.0 / total
                } else {
                    1.0 / total - 1.0 / interference
                } / LN_2;
                let (gre, gim) = gains[k * users + j];
                let f = 2.0 * gk * dp;
                for m in 0..antennas {
                    let (hre, him) = (hk[2 * m], hk[2 * m + 1]);
                    // g·h for the (x, y) partials of |g|²
                    let pr = gre * hre - gim * him;
                    let pi = gre * him + gim * hre;
                    drow[2 * antennas * j + 2 * m] += f * pr;
                    drow[2 * antennas * j + 2 * m + 1] += f * pi;
                }
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_gradient_is_input() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_vec(1, 3, vec![0.3, -1.0, 2.0]));
        let x = g.constant(Tensor::from_vec(1, 3, vec![4.0, 5.0, -6.0]));
        let p = g.mul(w, x);
        let loss = g.sum_all(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[4.0, 5.0, -6.0]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn stop_grad_blocks_flow() {
        let mut g = Graph::new();
        let u = g.param(Tensor::from_vec(1, 2, vec![1.0, 2.0]));
        let v = g.param(Tensor::from_vec(1, 2, vec![3.0, -1.0]));
        let su = g.stop_grad(u);
        let p = g.mul(su, v);
        let loss = g.sum_all(p);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(u).is_none());
        assert_eq!(grads.wrt(&g, u).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(v).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(f64::NAN));
        let l = g.sum_all(x);
        assert!(matches!(g.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn straight_through_copies_gradient() {
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(2, 2, vec![0.1, -0.2, 0.3, 0.4]));
        let table = g.param(Tensor::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]));
        let sel = g.gather(table, &[0, 1]);
        let q = g.value(sel).clone();
        let ste = g.straight_through(z, q.clone());
        assert_eq!(g.value(ste), &q);
        let loss = g.sum_all(ste);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[1.0; 4]);
        assert!(grads.get(table).is_none());
    }

    #[test]
    fn rates_of_zero_precoder_vanish() {
        let mut g = Graph::new();
        let v = g.param(Tensor::zeros(1, 8));
        let h = g.constant(Tensor::full(1, 8, 1.0));
        let r = g.rates(v, h, 2, 1.0);
        assert_eq!(g.value(r).data(), &[0.0, 0.0]);
    }
}
