//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is a plain value. Gradient bookkeeping lives on the nodes of a
//! [`Graph`](crate::graph::Graph), which wraps each tensor together with its
//! `requires_grad` flag and, after a backward pass, its gradient.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` view: scalars are 1×1, vectors 1×n.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap_or(&1);
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Plain matrix product without gradient tracking.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(&self.data, &other.data, &mut out, m, k, n);
        Tensor::matrix(m, n, out)
    }
}

/// Loop kernels shared by the forward and backward passes.
pub(crate) mod kernels {
    // Row-major strides throughout; beta = 1 accumulates into `out`.

    /// `out += a (m×k) · b (k×n)`.
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), n as isize, 1,
                1.0,
                out.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    /// `out += a (m×k) · bᵀ` where `b` is n×k.
    pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0,
                a.as_ptr(), k as isize, 1,
                b.as_ptr(), 1, k as isize,
                1.0,
                out.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    /// `out += aᵀ · b` where `a` is m×k and `b` is m×n; `out` is k×n.
    pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        debug_assert!(a.len() >= m * k && b.len() >= m * n && out.len() >= k * n);
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                k, m, n, 1.0,
                a.as_ptr(), 1, k as isize,
                b.as_ptr(), n as isize, 1,
                1.0,
                out.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        // Four accumulators let the compiler vectorize the reduction.
        let mut acc = [0.0f64; 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            let i = c * 4;
            acc[0] += a[i] * b[i];
            acc[1] += a[i + 1] * b[i + 1];
            acc[2] += a[i + 2] * b[i + 2];
            acc[3] += a[i + 3] * b[i + 3];
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for i in chunks * 4..a.len() {
            s += a[i] * b[i];
        }
        s
    }
}
