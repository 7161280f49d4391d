//! Numerical kernel: dense matrices, stable softmax, seeded sampling, a
//! first-order optimizer and a symmetric eigensolver.
//!
//! Everything is `f64`. Vectors are plain slices / `Vec<f64>`; [`Mat`] adds
//! row-major shape metadata on top.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix data"));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Mat, scale: f64) -> Result<()> {
        if self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch {
                expected: self.data.len(),
                got: other.data.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// `log Σ exp(x)` via max subtraction.
pub fn logsumexp(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    check_finite(logits, "logits")?;
    Ok(logsumexp_unchecked(logits))
}

pub(crate) fn logsumexp_unchecked(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    check_finite(logits, "logits")?;
    Ok(softmax_unchecked(logits))
}

/// Softmax that tolerates `-inf` entries (masked tokens get probability 0).
pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let lse = logsumexp(logits)?;
    Ok(logits.iter().map(|&x| x - lse).collect())
}

pub(crate) fn log_softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp_unchecked(logits);
    logits.iter().map(|&x| x - lse).collect()
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Explicitly seeded generator. Bit-exact for a given seed and call
/// sequence on every platform (ChaCha20 stream).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha20Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator keyed by `label`. Depends only on this
    /// generator's seed, not on how many draws it has made, so children can
    /// be created in any order (or on any thread) with identical results.
    pub fn derive(&self, label: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(label.wrapping_add(0x5851_f42d))))
    }

    pub fn derive2(&self, a: u64, b: u64) -> Rng {
        self.derive(a).derive(b)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n) as usize;
            }
        }
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn normal(&mut self) -> f64 {
        // Box-Muller; 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Draws an index from `probs`. The distribution must sum to 1 within 1e-6.
pub fn categorical_sample(probs: &[f64], rng: &mut Rng) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Empty("probs"));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::NonFinite("probs"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::NotADistribution(total));
    }
    Ok(sample_unchecked(probs, rng))
}

pub(crate) fn sample_unchecked(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `params += lr * grad`.
    #[default]
    Plain,
    /// Moment-based ascent (Adam update rule).
    Adam,
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(OptimizerState {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        })
    }

    pub fn plain(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Plain, learning_rate)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One gradient-ascent update, in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                expected: params.len(),
                got: grad.len(),
            });
        }
        check_finite(grad, "gradient")?;
        self.step += 1;
        match self.kind {
            OptimizerKind::Plain => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += self.learning_rate * g;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    self.m = vec![0.0; params.len()];
                    self.v = vec![0.0; params.len()];
                }
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = self.m[i] / c1;
                    let vhat = self.v[i] / c2;
                    params[i] += self.learning_rate * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors in the columns.
pub fn symmetric_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: a.cols(),
        });
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("symmetric_eigen input"));
    }
    let mut m = a.clone();
    // Symmetrize to remove round-off asymmetry from callers.
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
    let mut v = Mat::identity(n);
    let scale: f64 = m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..n).map(|i| m[(i, i)]).collect();
    Ok((values, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric_and_shift_invariant() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-700.0, -3.5, 0.0, 42.0, 999.0] {
            let p = softmax(&[c, c, c, c]).unwrap();
            assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let p = softmax(&x).unwrap();
        for (pi, xi) in p.iter().zip(x) {
            assert!((pi - xi.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[0.0, f64::NAN]).is_err());
        assert!(log_softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn log_softmax_is_stable() {
        let l = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(l.iter().all(|x| x.is_finite()));
        assert!(l[0].abs() < 1e-300);
        assert!((l[1] + 1000.0).abs() < 1e-9);
        let l = log_softmax(&[0.0, 0.0]).unwrap();
        assert!((l[0] - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn categorical_degenerate_and_invalid() {
        let mut rng = Rng::new(1);
        for _ in 0..100 {
            assert_eq!(categorical_sample(&[1.0, 0.0], &mut rng).unwrap(), 0);
        }
        assert!(matches!(
            categorical_sample(&[0.5, 0.6], &mut rng),
            Err(Error::NotADistribution(_))
        ));
    }

    #[test]
    fn categorical_frequency() {
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| categorical_sample(&[0.5, 0.5], &mut rng).unwrap() == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        assert!((0.49..=0.51).contains(&freq), "freq {freq}");
    }

    #[test]
    fn rng_is_reproducible_and_derive_is_order_free() {
        let a: Vec<u64> = {
            let mut r = Rng::new(7);
            (0..16).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::new(7);
            (0..16).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let mut parent = Rng::new(7);
        let c1 = parent.derive(3).next_u64();
        parent.next_u64();
        let c2 = parent.derive(3).next_u64();
        assert_eq!(c1, c2);
        assert_ne!(Rng::new(7).derive(3).next_u64(), Rng::new(7).derive(4).next_u64());
    }

    #[test]
    fn plain_optimizer_arithmetic() {
        let mut st = OptimizerState::plain(0.1).unwrap();
        let mut p = vec![1.0];
        st.step(&mut p, &[2.0]).unwrap();
        assert!((p[0] - 1.2).abs() < 1e-15);
        let before = p.clone();
        st.step(&mut p, &[0.0]).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 2);
        assert!(st.step(&mut p, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adam_increases_concave_quadratic_monotonically() {
        // f(x) = -(x - 3)^2 - 0.5 (y + 1)^2
        let f = |p: &[f64]| -(p[0] - 3.0).powi(2) - 0.5 * (p[1] + 1.0).powi(2);
        let mut st = OptimizerState::new(OptimizerKind::Adam, 0.01).unwrap();
        let mut p = vec![0.0, 0.0];
        let mut prev = f(&p);
        for _ in 0..100 {
            let g = vec![-2.0 * (p[0] - 3.0), -(p[1] + 1.0)];
            st.step(&mut p, &g).unwrap();
            let cur = f(&p);
            assert!(cur > prev);
            prev = cur;
        }
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let a = Mat::from_vec(3, 3, vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]).unwrap();
        let (vals, vecs) = symmetric_eigen(&a).unwrap();
        let mut d = Mat::zeros(3, 3);
        for i in 0..3 {
            d[(i, i)] = vals[i];
        }
        let rec = vecs.matmul(&d).unwrap().matmul(&vecs.transpose()).unwrap();
        for (x, y) in rec.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((vals.iter().sum::<f64>() - a.trace()).abs() < 1e-12);
    }
}
