//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward pass. [`Graph::backward`] walks the tape in reverse
//! from a scalar root and returns [`Gradients`] for every node that requires
//! them. A graph describes one loss evaluation and is not shared across
//! threads.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{kernels, Tensor};
use crate::{Error, Result, Rng};

/// Vectors whose L2 norm falls below this are normalized to zero.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    MeanRows {
        x: Var,
        start: usize,
        end: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    LinComb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() || self.dims(a) != self.dims(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, b) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *o += b;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, row]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() || self.dims(a) != self.dims(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2)));
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / math::sqrt(var + eps);
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout. A rate of zero returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(alloc::format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        use rand::Rng as _;
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = zip_map(self.value(x).data(), &mask, |v, m| v * m);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Dropout(x, mask), rg))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "gather",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Gather(table, ids.to_vec()),
            rg,
        ))
    }

    /// Picks rows of a matrix; same backward as [`Graph::gather`] but named
    /// for hidden-state selection.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.dims(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= m {
                return Err(Error::Index {
                    what: "select_rows",
                    index: r,
                    bound: m,
                });
            }
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(rows.len(), d, out)?,
            Op::SelectRows(x, rows.to_vec()),
            rg,
        ))
    }

    /// Mean of rows `start..end` as a 1×d matrix.
    pub fn mean_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, d) = self.dims(x);
        if start >= end || end > m {
            return Err(Error::Index {
                what: "mean_rows",
                index: end,
                bound: m,
            });
        }
        let src = self.value(x).data();
        let out = math::mean_of_rows((start..end).map(|r| &src[r * d..(r + 1) * d]), d);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(1, d, out)?, Op::MeanRows { x, start, end }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = match parts.first() {
            Some(&p) => self.dims(p).1,
            None => return Err(Error::Input("concat_rows of nothing".into())),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != d {
                return Err(Error::shape("concat_rows", &[d], self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, d, out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.dims(p).0,
            None => return Err(Error::Input("concat_cols of nothing".into())),
        };
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::shape("concat_cols", &[m], self.shape(p)));
            }
            total += c;
        }
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = self.dims(p);
            let src = self.value(p).data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + c]
                    .copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            offset += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` get probability
    /// exactly zero; a row with no visible column is all zeros.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x);
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(Error::shape("softmax_rows", self.shape(x), &[mask.len()]));
            }
        }
        let visible = |j: usize| key_mask.is_none_or(|mask| mask[j]);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                if visible(j) && row[j] > max {
                    max = row[j];
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for j in 0..n {
                if visible(j) {
                    let e = math::exp(row[j] - max);
                    out[i * n + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= z;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`, computed with
    /// max subtraction. Zero rows give a constant zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if m == 0 {
            return Ok(self.scalar(0.0));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= n {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    bound: n,
                });
            }
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| math::exp(v - max)).sum();
            let lse = max + math::ln(z);
            total += lse - row[t];
            for j in 0..n {
                probs[i * n + j] = math::exp(row[j] - lse);
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scales each row to unit L2 norm. Rows with norm below [`NORM_EPS`]
    /// become zero and pass no gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut norms = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let norm = math::sqrt(kernels::dot(row, row));
            norms[i] = norm;
            if norm >= NORM_EPS {
                for j in 0..n {
                    out[i * n + j] = row[j] / norm;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::NormalizeRows { x, norms }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ cᵢ·xᵢ` over scalar nodes.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("lin_comb", self.shape(v), &[]));
            }
            s += c * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        Ok(self.push(Tensor::scalar(s), Op::LinComb(terms.to_vec()), rg))
    }

    /// Cosine similarity of two equal-length vectors (any shape with the
    /// same element count), as a scalar node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 || n != self.value(b).len() {
            return Err(Error::shape("cosine", self.shape(a), self.shape(b)));
        }
        let a = self.reshape_row(a)?;
        let b = self.reshape_row(b)?;
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        let prod = self.mul(an, bn)?;
        Ok(self.sum(prod))
    }

    /// Views any tensor as a single row, reusing the node when it already is
    /// one.
    fn reshape_row(&mut self, x: Var) -> Result<Var> {
        if self.dims(x).0 == 1 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let rows: Vec<usize> = (0..self.dims(x).0).collect();
        let parts: Vec<Var> = rows
            .iter()
            .map(|&r| self.select_rows(x, &[r]))
            .collect::<Result<_>>()?;
        let row = self.concat_cols(&parts)?;
        debug_assert_eq!(self.value(row).len(), n);
        Ok(row)
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires them.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root", self.shape(root), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |da| kernels::matmul_nt(g, bv, da, m, n, k));
                acc(*b, &mut |db| kernels::matmul_tn(av, g, db, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let (n, _) = self.dims(*b);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |da| kernels::matmul(g, bv, da, m, n, k));
                acc(*b, &mut |db| kernels::matmul_tn(g, av, db, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::AddRow(a, row) => {
                let (_, n) = self.dims(*a);
                acc(*a, &mut |da| add_into(da, g));
                acc(*row, &mut |dr| {
                    for chunk in g.chunks(n) {
                        add_into(dr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &mut |da| {
                    for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |da| {
                for (d, gi) in da.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }),
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let inv_sqrt_2pi = 1.0 / math::sqrt(2.0 * core::f64::consts::PI);
                acc(*a, &mut |da| {
                    for ((d, gi), &x) in da.iter_mut().zip(g).zip(xv) {
                        let cdf = 0.5 * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2));
                        let pdf = inv_sqrt_2pi * math::exp(-0.5 * x * x);
                        *d += gi * (cdf + x * pdf);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gamma).data();
                acc(*gamma, &mut |dg| {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for chunk in g.chunks(n) {
                        add_into(db, chunk);
                    }
                });
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            dx[i * n + j] += rstd[i] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Dropout(x, mask) => acc(*x, &mut |dx| {
                for ((d, gi), m) in dx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }),
            Op::Gather(src, ids) | Op::SelectRows(src, ids) => {
                let (_, d) = self.dims(*src);
                acc(*src, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::MeanRows { x, start, end } => {
                let (_, d) = self.dims(*x);
                let inv = 1.0 / (end - start) as f64;
                acc(*x, &mut |dx| {
                    for r in *start..*end {
                        for (o, gi) in dx[r * d..(r + 1) * d].iter_mut().zip(g) {
                            *o += gi * inv;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = node.value.cols();
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        add_into(
                            &mut dx[i * n + start..i * n + start + len],
                            &g[i * len..(i + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (m, c) = self.dims(p);
                    acc(p, &mut |dp| {
                        for i in 0..m {
                            add_into(
                                &mut dp[i * c..(i + 1) * c],
                                &g[i * total + offset..i * total + offset + c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::Softmax(x) => {
                let (m, n) = self.dims(*x);
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s = kernels::dot(yr, gr);
                        for j in 0..n {
                            dx[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, n) = self.dims(*logits);
                let scale = g[0] / m as f64;
                acc(*logits, &mut |dl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            dl[i * n + j] += scale * probs[i * n + j];
                        }
                        dl[i * n + t] -= scale;
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let (m, n) = self.dims(*x);
                let y = node.value.data();
                acc(*x, &mut |dx| {
                    for i in 0..m {
                        if norms[i] < NORM_EPS {
                            continue;
                        }
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let s = kernels::dot(yr, gr);
                        for j in 0..n {
                            dx[i * n + j] += (gr[j] - yr[j] * s) / norms[i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    acc(v, &mut |dv| dv[0] += c * g[0]);
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no path from the root reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
