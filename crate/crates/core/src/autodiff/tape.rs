//! Define-by-run reverse-mode tape.
//!
//! Every forward pass builds a fresh [`Tape`]. Operations append nodes in
//! execution order, so the node list is already topologically sorted and
//! [`Tape::backward`] walks it in reverse. Nodes that do not depend on any
//! gradient-requiring leaf are skipped during the backward sweep.

use super::tensor::{Tensor, NORM_EPS};
use crate::error::{DinError, Result};

/// Handle to a node on a [`Tape`] (its `node_id`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    NormalizeRows(Var),
    GradReverse(Var, f64),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    RowDot(Var, Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    NllRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

/// `out (+)= op(a) · op(b)` for row-major buffers; `a` is `[m,k]` after the
/// optional transpose, `b` is `[k,n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe in-bounds row-major views of `a`, `b` and
    // `out`, whose lengths are m*k, k*n and m*n respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

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

    /// Gradient-tracked leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, true)
    }

    /// Untracked leaf; nothing flows back into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    /// Copy of `v`'s value as an untracked constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(DinError::shape("matmul", &self.shape(a), &self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(DinError::shape("add", &self.shape(a), &self.shape(b)));
        }
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds the length-`n` vector `bias` to every row of `a` (`[m, n]`).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        if self.nodes[bias.0].value.len() != n {
            return Err(DinError::shape("add_row", &self.shape(a), &self.shape(bias)));
        }
        let b = self.nodes[bias.0].value.data();
        let data = self.nodes[a.0]
            .value
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a);
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * s).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Elementwise `max(x, slope·x)` for `slope ∈ (0, 1)`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data()
                .iter()
                .map(|&v| if v > 0.0 { v } else { slope * v })
                .collect(),
        )
        .expect("shape preserved");
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    /// Row-wise `x / ‖x‖₂`; fails on any row with norm at or below 1e-12.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(c.max(1)) {
            let n = super::tensor::l2_norm(row);
            if n <= NORM_EPS {
                return Err(DinError::Degenerate {
                    op: "l2_normalize",
                    norm: n,
                    eps: NORM_EPS,
                });
            }
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::NormalizeRows(a), rg))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Var {
        let out = self.nodes[a.0].value.clone();
        let rg = self.rg(a);
        self.push(out, Op::GradReverse(a, lambda), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        if ra != rb {
            return Err(DinError::shape("concat_cols", &self.shape(a), &self.shape(b)));
        }
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(ra, ca + cb, data)?, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| DinError::shape("concat_rows", &[], &[]))?;
        let c = self.dims(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (r, pc) = self.dims(p);
            if pc != c {
                return Err(DinError::shape("concat_rows", &self.shape(first), &self.shape(p)));
            }
            data.extend_from_slice(self.nodes[p.0].value.data());
            rows += r;
            rg |= self.rg(p);
        }
        Ok(self.push(Tensor::matrix(rows, c, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Gathers rows of `a` by index (indices may repeat).
    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a);
        let src = self.nodes[a.0].value.data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(DinError::Index {
                    op: "select_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::matrix(indices.len(), c, data)?,
            Op::SelectRows(a, indices.to_vec()),
            rg,
        ))
    }

    /// Per-row inner products, shape `[m, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if (r, c) != self.dims(b) {
            return Err(DinError::shape("row_dot", &self.shape(a), &self.shape(b)));
        }
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let data = (0..r)
            .map(|i| {
                da[i * c..(i + 1) * c]
                    .iter()
                    .zip(&db[i * c..(i + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, 1, data)?, Op::RowDot(a, b), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * v).collect())
            .expect("shape preserved");
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean over rows of `-log softmax(row)[target]`, computed with
    /// max-subtraction.
    pub fn log_softmax_nll(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(DinError::shape("log_softmax_nll", &self.shape(logits), &[targets.len()]));
        }
        let data = self.nodes[logits.0].value.data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            total += super::tensor::log_softmax_nll(&data[i * c..(i + 1) * c], t)?;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / r.max(1) as f64),
            Op::NllRows(logits, targets.to_vec()),
            rg,
        ))
    }

    /// Cosine similarity between matching rows of `a` and `b`, shape `[m, 1]`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        self.row_dot(na, nb)
    }

    /// Backward sweep from a scalar root (seed 1).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let len = self.nodes[root.0].value.len();
        if len != 1 {
            return Err(DinError::shape("backward", &self.shape(root), &[1]));
        }
        self.backward_with(root, &[1.0])
    }

    /// Backward sweep seeded with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: Var, seed: &[f64]) -> Result<Gradients> {
        if seed.len() != self.nodes[root.0].value.len() {
            return Err(DinError::shape("backward_with", &self.shape(root), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if self.rg(root) {
            grads[root.0] = Some(seed.to_vec());
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, self.nodes[b.0].value.data(), true, &mut da, false);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.nodes[a.0].value.data(), true, g, false, &mut db, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.rg(*bias) {
                    let n = self.dims(*a).1;
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n.max(1)) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::LeakyRelu(a, slope) => {
                let x = self.nodes[a.0].value.data();
                let da = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { slope * gv })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::NormalizeRows(a) => {
                let x = self.nodes[a.0].value.data();
                let y = node.value.data();
                let c = node.value.cols().max(1);
                let mut da = vec![0.0; x.len()];
                for (i, row) in x.chunks(c).enumerate() {
                    let n = super::tensor::l2_norm(row);
                    let span = i * c..(i + 1) * c;
                    let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[i * c + j] = (gr[j] - yr[j] * proj) / n;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::GradReverse(a, lambda) => {
                self.accumulate(grads, *a, g.iter().map(|v| -lambda * v).collect())
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = self.dims(*a);
                let cb = self.dims(*b).1;
                let w = ca + cb;
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for i in 0..r {
                    da.extend_from_slice(&g[i * w..i * w + ca]);
                    db.extend_from_slice(&g[i * w + ca..(i + 1) * w]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.accumulate(grads, *p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SelectRows(a, indices) => {
                let c = self.dims(*a).1;
                let mut da = vec![0.0; self.nodes[a.0].value.len()];
                for (k, &i) in indices.iter().enumerate() {
                    for j in 0..c {
                        da[i * c + j] += g[k * c + j];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RowDot(a, b) => {
                let c = self.dims(*a).1;
                let (xa, xb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let scale_rows = |src: &[f64]| -> Vec<f64> {
                    src.iter()
                        .enumerate()
                        .map(|(idx, v)| v * g[idx / c.max(1)])
                        .collect()
                };
                if self.rg(*a) {
                    self.accumulate(grads, *a, scale_rows(xb));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, scale_rows(xa));
                }
            }
            Op::Square(a) => {
                let x = self.nodes[a.0].value.data();
                self.accumulate(grads, *a, x.iter().zip(g).map(|(v, gv)| 2.0 * v * gv).collect());
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(grads, *a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::NllRows(a, targets) => {
                let (r, c) = self.dims(*a);
                let x = self.nodes[a.0].value.data();
                let scale = g[0] / r.max(1) as f64;
                let mut da = Vec::with_capacity(r * c);
                for (i, &t) in targets.iter().enumerate() {
                    let mut p = softmax_row(&x[i * c..(i + 1) * c]);
                    p[t] -= 1.0;
                    da.extend(p.into_iter().map(|v| v * scale));
                }
                self.accumulate(grads, *a, da);
            }
        }
    }
}
