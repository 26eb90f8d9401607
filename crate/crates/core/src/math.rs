//! Float functions that `core` does not provide.

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

#[inline]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

/// `a·b / sqrt(|a|² |b|²)`, zero when either norm is below `NORM_EPS`.
///
/// Computing the denominator as one square root makes the cosine of a vector
/// with itself exactly 1.0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if sqrt(aa) < crate::graph::NORM_EPS || sqrt(bb) < crate::graph::NORM_EPS {
        return 0.0;
    }
    (dot / sqrt(aa * bb)).clamp(-1.0, 1.0)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Row mean with a fixed summation order; the embedding initializer and the
/// similarity report both go through here.
pub fn mean_of_rows<'a, I>(rows: I, width: usize) -> alloc::vec::Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut acc = alloc::vec![0.0; width];
    let mut n = 0usize;
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
        n += 1;
    }
    if n > 0 {
        let n = n as f64;
        for a in &mut acc {
            *a /= n;
        }
    }
    acc
}
