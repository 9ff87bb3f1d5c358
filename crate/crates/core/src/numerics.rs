//! Dense vector/matrix helpers, stable softmax, cosine distance and the
//! seeded random number generator shared by every stochastic operation.
//!
//! All arithmetic is `f64`. The generator is ChaCha8 (`rand_chacha`), seeded
//! from a single `u64` through `SeedableRng::seed_from_u64`, which is portable
//! and stable across platforms.

use rand::distr::{Open01, StandardUniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix; rows are samples, columns are dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatRepr")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct MatRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatRepr> for Mat {
    type Error = Error;
    fn try_from(m: MatRepr) -> Result<Self> {
        Mat::from_vec(m.rows, m.cols, m.data)
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Mat {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// New matrix holding the selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Keeps the first `cols` columns.
    pub fn truncate_cols(&self, cols: usize) -> Mat {
        assert!(cols <= self.cols);
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[..cols]);
        }
        Mat {
            rows: self.rows,
            cols,
            data,
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Softmax with max-shift. Rejects empty and non-finite input.
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::Empty("logit vector"));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(softmax_unchecked(z))
}

/// Softmax for callers that already guarantee finite, non-empty input.
/// A `-inf` entry is allowed and maps to probability zero.
pub(crate) fn softmax_unchecked(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// `1 - cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let (na, nb) = (sq_norm(a), sq_norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(cosine_distance_sq(a, na, b, nb))
}

/// Cosine distance from squared norms known to be nonzero. Taking a single
/// square root of the product makes `d(a, a) = 0` exact.
#[inline]
pub(crate) fn cosine_distance_sq(a: &[f64], na2: f64, b: &[f64], nb2: f64) -> f64 {
    let cos = (dot(a, b) / (na2 * nb2).sqrt()).clamp(-1.0, 1.0);
    1.0 - cos
}

/// Index of the maximum entry; ties go to the lowest index.
///
/// Panics on an empty slice.
pub fn argmax(v: &[f64]) -> usize {
    assert!(!v.is_empty(), "argmax of empty vector");
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Largest entry of a non-empty slice.
pub fn max_value(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Deterministic generator (ChaCha8) with the samplers the toolkit needs.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a worker: seed XOR worker index.
    pub fn split(seed: u64, worker: u64) -> Self {
        SeededRng::new(seed ^ worker)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.sample(StandardUniform)
    }

    /// Uniform on `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        self.inner.sample(Open01)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Gamma(shape, 1) by Marsaglia-Tsang; shapes below one use the
    /// `Gamma(a + 1) * U^(1/a)` boost.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        if !(shape > 0.0 && shape.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma shape must be positive, got {shape}"
            )));
        }
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0)?;
            return Ok(g * self.uniform_open().powf(1.0 / shape));
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform_open();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return Ok(d * v);
            }
        }
    }

    /// Beta(a, b) as `X / (X + Y)` with `X ~ Gamma(a)`, `Y ~ Gamma(b)`.
    pub fn beta(&mut self, a: f64, b: f64) -> Result<f64> {
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "beta parameters must be positive, got ({a}, {b})"
            )));
        }
        let x = self.gamma(a)?;
        let y = self.gamma(b)?;
        Ok(x / (x + y))
    }
}

/// Free-function form of [`SeededRng::beta`].
pub fn sample_beta(rng: &mut SeededRng, a: f64, b: f64) -> Result<f64> {
    rng.beta(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let y = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_logits() {
        // Reference: y1 = 1 / (1 + e^1000) = e^-1000 / (1 + e^-1000), which
        // underflows to 0 in f64; y0 = 1 / (1 + e^-1000) rounds to 1.
        let y = softmax(&[1000.0, 0.0]).unwrap();
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(y[0], 1.0);
        assert!(y[1] < 1e-300);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax(&[]), Err(Error::Empty(_))));
        assert!(matches!(
            softmax(&[0.0, f64::NAN]),
            Err(Error::NonFinite(1))
        ));
        assert!(matches!(
            softmax(&[f64::INFINITY]),
            Err(Error::NonFinite(0))
        ));
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 2.0, 3.0];
        assert!(cosine_distance(&a, &a).unwrap().abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&a, &[-1.0, -2.0, -3.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            cosine_distance(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm)
        ));
        assert!(matches!(
            cosine_distance(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn beta_uniform_moments() {
        let mut rng = SeededRng::new(11);
        let n = 100_000;
        let mut mean = 0.0;
        for _ in 0..n {
            let x = rng.beta(1.0, 1.0).unwrap();
            assert!((0.0..=1.0).contains(&x));
            mean += x;
        }
        mean /= n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn beta_2_2_moments() {
        // Var = ab / ((a+b)^2 (a+b+1)) = 4 / (16 * 5) = 0.05
        let mut rng = SeededRng::new(12);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.beta(2.0, 2.0).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
        assert!((var - 0.05).abs() < 0.005, "var {var}");
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn beta_rejects_bad_params() {
        let mut rng = SeededRng::new(0);
        assert!(rng.beta(0.0, 1.0).is_err());
        assert!(rng.beta(1.0, -2.0).is_err());
    }

    #[test]
    fn small_shape_gamma_mean() {
        let mut rng = SeededRng::new(5);
        let n = 100_000;
        let m = (0..n).map(|_| rng.gamma(0.5).unwrap()).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 0.01, "mean {m}");
    }

    #[test]
    fn split_is_xor() {
        let mut a = SeededRng::split(42, 3);
        let mut b = SeededRng::new(42 ^ 3);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn mat_rows() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.row(1), &[3.0, 4.0]);
        assert_eq!(m.select_rows(&[1, 0]).row(0), &[3.0, 4.0]);
        assert_eq!(m.truncate_cols(1).as_slice(), &[1.0, 3.0]);
        assert!(Mat::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
