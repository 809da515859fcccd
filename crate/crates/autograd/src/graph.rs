//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! for every node that (transitively) depends on a parameter.

use std::sync::Arc;

use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Silu(Var),
    SoftmaxRows(Var),
    RmsNormRows(Var, f64),
    Gather {
        src: Var,
        index: Arc<Vec<Option<usize>>>,
        taps: usize,
    },
    ReplaceRows {
        base: Var,
        rows: Vec<usize>,
        src: Var,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SumAll(Var),
    Mse(Var, Arc<Tensor>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
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
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, t: Arc<Tensor>) -> Var {
        self.push_arc(t, Op::Leaf, false)
    }

    /// A trainable leaf registered under `name`.
    pub fn param(&mut self, name: &str, t: Arc<Tensor>) -> Var {
        let v = self.push_arc(t, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let mut value = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in value.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Adds a constant tensor; the gradient passes through unchanged.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let value = self.value(a).add(c);
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_rows();
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Parameter-free RMS normalisation of each row.
    pub fn rms_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let inv = 1.0 / rms(row, eps);
            row.iter_mut().for_each(|x| *x *= inv);
        }
        let rg = self.rg(a);
        self.push(value, Op::RmsNormRows(a, eps), rg)
    }

    /// Builds rows by concatenating `taps` source rows each.
    ///
    /// Output row `r` is the concatenation of `src[index[r * taps + t]]`
    /// for `t in 0..taps`, with `None` entries contributing zeros. With
    /// `taps == 1` this is an embedding lookup; with a 3x3 neighbourhood
    /// table it is the im2col step of a convolution.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<Option<usize>>>, taps: usize) -> Var {
        assert!(taps > 0 && index.len() % taps == 0, "bad gather table");
        let s = self.value(src);
        let c = s.cols();
        let out_rows = index.len() / taps;
        let mut value = Tensor::zeros(out_rows, taps * c);
        for (slot, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                let r = slot / taps;
                let t = slot % taps;
                value.row_mut(r)[t * c..(t + 1) * c].copy_from_slice(s.row(i));
            }
        }
        let rg = self.rg(src);
        self.push(value, Op::Gather { src, index, taps }, rg)
    }

    /// Copy of `base` with `rows[i]` replaced by row `i` of `src`.
    pub fn replace_rows(&mut self, base: Var, rows: &[usize], src: Var) -> Var {
        let (_, c) = self.shape(base);
        assert_eq!(self.shape(src), (rows.len(), c), "replace_rows shape mismatch");
        let mut value = self.value(base).clone();
        for (i, &r) in rows.iter().enumerate() {
            let row = self.value(src).row(i).to_vec();
            value.row_mut(r).copy_from_slice(&row);
        }
        let rg = self.rg(base) || self.rg(src);
        self.push(
            value,
            Op::ReplaceRows {
                base,
                rows: rows.to_vec(),
                src,
            },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Tensor::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let t = self.value(a);
        assert!(start <= end && end <= t.cols());
        let mut value = Tensor::zeros(t.rows(), end - start);
        for r in 0..t.rows() {
            value.row_mut(r).copy_from_slice(&t.row(r)[start..end]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols(a, start, end), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    /// Mean squared error against a constant target, as a `1 x 1` node.
    pub fn mse(&mut self, a: Var, target: Arc<Tensor>) -> Var {
        let pred = self.value(a);
        assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
        let n = pred.len().max(1) as f64;
        let sq: f64 = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(sq / n), Op::Mse(a, target), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of every registered parameter, in registration order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*v).0, self.shape(*v).1));
                (name.clone(), g)
            })
            .collect()
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce(&mut Tensor),
    ) {
        if !self.rg(v) {
            return;
        }
        let (r, c) = self.shape(v);
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // out = A B ; dA = G Bᵀ ; dB = Aᵀ G
                if self.rg(*a) {
                    let bv = self.value(*b);
                    self.accumulate_with(grads, *a, |da| gemm(g, false, bv, true, da, 1.0));
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    self.accumulate_with(grads, *b, |db| gemm(av, true, g, false, db, 1.0));
                }
            }
            Op::MatMulT(a, b) => {
                // out = A Bᵀ ; dA = G B ; dB = Gᵀ A
                if self.rg(*a) {
                    let bv = self.value(*b);
                    self.accumulate_with(grads, *a, |da| gemm(g, false, bv, false, da, 1.0));
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    self.accumulate_with(grads, *b, |db| gemm(g, true, av, false, db, 1.0));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut d = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, x) in d.row_mut(0).iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    self.accumulate(grads, *row, d);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RmsNormRows(a, eps) => {
                let x = self.value(*a);
                let mut d = Tensor::zeros(out.rows(), out.cols());
                let n = out.cols() as f64;
                for r in 0..out.rows() {
                    let inv = 1.0 / rms(x.row(r), *eps);
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *dv = (gv - yv * dot) * inv;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Gather { src, index, taps } => {
                let c = self.shape(*src).1;
                self.accumulate_with(grads, *src, |ds| {
                    for (slot, idx) in index.iter().enumerate() {
                        if let Some(i) = *idx {
                            let r = slot / taps;
                            let t = slot % taps;
                            let gr = &g.row(r)[t * c..(t + 1) * c];
                            for (acc, x) in ds.row_mut(i).iter_mut().zip(gr) {
                                *acc += x;
                            }
                        }
                    }
                });
            }
            Op::ReplaceRows { base, rows, src } => {
                if self.rg(*base) {
                    let mut d = g.clone();
                    for &r in rows {
                        d.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
                    }
                    self.accumulate(grads, *base, d);
                }
                if self.rg(*src) {
                    let c = g.cols();
                    let mut d = Tensor::zeros(rows.len(), c);
                    for (i, &r) in rows.iter().enumerate() {
                        d.row_mut(i).copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.rg(p) {
                        let mut d = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, d);
                    }
                    off += cols;
                }
            }
            Op::SliceCols(a, start, end) => {
                self.accumulate_with(grads, *a, |da| {
                    for r in 0..g.rows() {
                        for (acc, x) in da.row_mut(r)[*start..*end].iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(r, c, g.item()));
            }
            Op::Mse(a, target) => {
                let pred = self.value(*a);
                let k = 2.0 * g.item() / pred.len().max(1) as f64;
                let d = pred.zip_map(target, |p, t| k * (p - t));
                self.accumulate(grads, *a, d);
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn rms(row: &[f64], eps: f64) -> f64 {
    let n = row.len().max(1) as f64;
    (row.iter().map(|x| x * x).sum::<f64>() / n + eps).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of `f` around every entry of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut out = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let f = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.param("x", Arc::new(t.clone()));
            let out = build(&mut g, v);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let v = g.param("x", Arc::new(x.clone()));
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.get(v).unwrap();
        let numeric = numeric_grad(&x, &f);
        let err = analytic.max_abs_diff(&numeric);
        assert!(err < 1e-6, "gradient mismatch {err}: {analytic:?} vs {numeric:?}");
    }

    fn rand(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_and_transpose_products() {
        let w = Arc::new(rand(4, 3, 1));
        check(
            |g, x| {
                let wv = g.constant_arc(w.clone());
                let y = g.matmul(x, wv);
                let z = g.matmul_t(y, y);
                g.sum_all(z)
            },
            rand(5, 4, 2),
        );
    }

    #[test]
    fn softmax_with_masked_entries() {
        let mut mask = Tensor::zeros(3, 4);
        mask.set(0, 1, f64::MIN);
        mask.set(2, 3, f64::MIN);
        let target = Arc::new(rand(3, 4, 9));
        check(
            |g, x| {
                let m = g.add_const(x, &mask);
                let s = g.softmax_rows(m);
                g.mse(s, target.clone())
            },
            rand(3, 4, 3),
        );
    }

    #[test]
    fn norm_relu_silu_chain() {
        let target = Arc::new(rand(4, 6, 11));
        check(
            |g, x| {
                let n = g.rms_norm_rows(x, 1e-6);
                let a = g.silu(n);
                let b = g.relu(x);
                let c = g.mul(a, b);
                let d = g.sub(c, x);
                let e = g.scale(d, 0.7);
                g.mse(e, target.clone())
            },
            rand(4, 6, 4),
        );
    }

    #[test]
    fn gather_replace_concat_slice() {
        let index = Arc::new(vec![Some(2), None, Some(0), Some(2), Some(1), None]);
        let src = Arc::new(rand(2, 4, 12));
        check(
            |g, x| {
                let gathered = g.gather(x, index.clone(), 2);
                let s = g.constant_arc(src.clone());
                let replaced = g.replace_rows(gathered, &[0, 2], s);
                let left = g.slice_cols(replaced, 0, 3);
                let right = g.slice_cols(replaced, 1, 4);
                let both = g.concat_cols(&[left, right, x]);
                let sq = g.mul(both, both);
                g.sum_all(sq)
            },
            rand(3, 2, 5),
        );
    }

    #[test]
    fn add_row_broadcast() {
        let base = Arc::new(rand(5, 3, 13));
        let target = Arc::new(rand(5, 3, 14));
        check(
            |g, x| {
                let b = g.constant_arc(base.clone());
                let y = g.add_row(b, x);
                let z = g.add(y, y);
                g.mse(z, target.clone())
            },
            rand(1, 3, 7),
        );
    }

    #[test]
    fn frozen_branches_receive_no_gradient() {
        let mut g = Graph::new();
        let frozen = g.constant(Tensor::full(2, 2, 1.0));
        let p = g.param("p", Arc::new(Tensor::full(2, 2, 2.0)));
        let y = g.mul(frozen, p);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(p).unwrap(), &Tensor::full(2, 2, 1.0));
        let named = g.param_grads(&grads);
        assert_eq!(named.len(), 1);
        assert_eq!(named[0].0, "p");
    }
}
