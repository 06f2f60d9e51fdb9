//! Dense row-major matrices and the handful of reductions the estimators need.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut, Index, IndexMut};

use crate::error::{ensure_len, ensure_nonneg, Error, Result};

/// A dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(transparent))]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self(vec![value; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self(data)
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Self(data.to_vec())
    }
}

impl<const N: usize> From<[f64; N]> for Vector {
    fn from(data: [f64; N]) -> Self {
        Self(data.to_vec())
    }
}

impl AsRef<[f64]> for Vector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// A dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure_len("Matrix::from_vec", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            ensure_len("Matrix::from_rows", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        ensure_len("matvec", self.cols, x.len())?;
        Ok((0..self.rows)
            .map(|r| dot(self.row(r), x))
            .collect::<Vec<_>>()
            .into())
    }

    /// `selfᵀ · y`.
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vector> {
        ensure_len("matvec_transposed", self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out.into())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    ensure_len("matmul", a.cols, b.rows)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Diagonal of `J · diag(var) · Jᵀ`, i.e. `out_k = Σ_d J²_kd · var_d`.
pub fn sandwich_diag(j: &Matrix, var: &[f64]) -> Result<Vector> {
    ensure_len("sandwich_diag", j.cols, var.len())?;
    ensure_nonneg(var)?;
    Ok((0..j.rows)
        .map(|k| j.row(k).iter().zip(var).map(|(w, v)| w * w * v).sum())
        .collect::<Vec<f64>>()
        .into())
}

/// Per-dimension sample mean and unbiased (`N − 1`) sample variance.
///
/// Deviations are taken relative to the first sample, so a list of identical
/// samples returns that sample as the mean and exactly zero variance.
pub fn mean_and_variance<V: AsRef<[f64]>>(samples: &[V]) -> Result<(Vector, Vector)> {
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            op: "mean_and_variance",
            required: 2,
            actual: samples.len(),
        });
    }
    let shift = samples[0].as_ref();
    let dim = shift.len();
    let mut mean_dev = vec![0.0; dim];
    for s in samples {
        let s = s.as_ref();
        ensure_len("mean_and_variance", dim, s.len())?;
        for ((m, x), x0) in mean_dev.iter_mut().zip(s).zip(shift) {
            *m += x - x0;
        }
    }
    let n = samples.len() as f64;
    mean_dev.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for s in samples {
        for (((v, x), x0), m) in var.iter_mut().zip(s.as_ref()).zip(shift).zip(&mean_dev) {
            let d = (x - x0) - m;
            *v += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n - 1.0);
    let mean: Vec<f64> = shift.iter().zip(&mean_dev).map(|(x0, m)| x0 + m).collect();
    Ok((mean.into(), var.into()))
}

/// Per-dimension mean of a nonempty sample list; exact for identical samples.
pub fn mean<V: AsRef<[f64]>>(samples: &[V]) -> Result<Vector> {
    let shift = samples
        .first()
        .ok_or(Error::InsufficientSamples {
            op: "mean",
            required: 1,
            actual: 0,
        })?
        .as_ref();
    let mut acc = vec![0.0; shift.len()];
    for s in samples {
        ensure_len("mean", acc.len(), s.as_ref().len())?;
        for ((a, x), x0) in acc.iter_mut().zip(s.as_ref()).zip(shift) {
            *a += x - x0;
        }
    }
    let n = samples.len() as f64;
    Ok(shift
        .iter()
        .zip(&acc)
        .map(|(x0, a)| x0 + a / n)
        .collect::<Vec<_>>()
        .into())
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| libm::exp(z - max)).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect::<Vec<_>>().into()
}

/// `log Σ exp(z)` with max-shift stabilization.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(logits.iter().map(|z| libm::exp(z - max)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.uniform(-2.0, 2.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn identity_times_m_is_m() {
        let mut rng = RngStream::new(1, 0);
        let m = random_matrix(&mut rng, 3, 3);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn small_hand_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
        assert_eq!((c.rows(), c.cols()), (2, 1));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(7, 3);
        let a = random_matrix(&mut rng, 5, 4);
        let b = random_matrix(&mut rng, 4, 3);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sandwich_identity_and_diagonal() {
        let out = sandwich_diag(&Matrix::identity(2), &[0.25, 0.25]).unwrap();
        assert_eq!(out.as_slice(), &[0.25, 0.25]);
        let j = Matrix::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
        assert_eq!(sandwich_diag(&j, &[1.0, 1.0]).unwrap().as_slice(), &[4.0, 9.0]);
    }

    #[test]
    fn sandwich_matches_dense_oracle() {
        let mut rng = RngStream::new(11, 0);
        let j = random_matrix(&mut rng, 3, 4);
        let var: Vec<f64> = (0..4).map(|_| rng.uniform(0.0, 2.0)).collect();
        let mut d = Matrix::zeros(4, 4);
        for (i, v) in var.iter().enumerate() {
            d[(i, i)] = *v;
        }
        let dense = naive_matmul(&naive_matmul(&j, &d), &j.transpose());
        let diag = sandwich_diag(&j, &var).unwrap();
        for k in 0..3 {
            assert!((diag[k] - dense[(k, k)]).abs() < 1e-12);
        }
    }

    #[test]
    fn sandwich_rejects_negative_variance() {
        let err = sandwich_diag(&Matrix::identity(2), &[1.0, -0.1]).unwrap_err();
        assert_eq!(err, Error::NegativeVariance { index: 1, value: -0.1 });
    }

    #[test]
    fn mean_and_variance_two_points() {
        let (m, v) = mean_and_variance(&[[1.0, 1.0], [3.0, 3.0]]).unwrap();
        assert_eq!(m.as_slice(), &[2.0, 2.0]);
        assert_eq!(v.as_slice(), &[2.0, 2.0]);
        let (_, v) = mean_and_variance(&[[0.3, -1.7]; 5]).unwrap();
        assert_eq!(v.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_and_variance_needs_two_samples() {
        assert!(matches!(
            mean_and_variance(&[[1.0]]),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn mean_and_variance_of_gaussian_draws() {
        let mut rng = RngStream::new(5, 9);
        let draws = rng.gaussian(&[5.0], &[4.0], 1000).unwrap();
        let (m, v) = mean_and_variance(&draws).unwrap();
        assert!((m[0] - 5.0).abs() < 0.3);
        assert!((v[0] - 4.0).abs() < 0.6);
    }

    #[test]
    fn softmax_is_stable() {
        let p = softmax(&[1000.0, -1000.0]);
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
        assert!((log_sum_exp(&[0.0, 0.0]) - core::f64::consts::LN_2).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..5, k in 1usize..5, l in 1usize..5, m in 1usize..5) {
            let mut rng = RngStream::new(seed, 0);
            let a = random_matrix(&mut rng, n, k);
            let b = random_matrix(&mut rng, k, l);
            let c = random_matrix(&mut rng, l, m);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.as_slice().iter().fold(1.0f64, |s, x| s.max(x.abs()));
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn sandwich_is_nonnegative(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..6) {
            let mut rng = RngStream::new(seed, 1);
            let j = random_matrix(&mut rng, rows, cols);
            let var: Vec<f64> = (0..cols).map(|_| rng.uniform(0.0, 3.0)).collect();
            prop_assert!(sandwich_diag(&j, &var).unwrap().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn mean_and_variance_is_permutation_invariant(seed in any::<u64>(), n in 2usize..12) {
            let mut rng = RngStream::new(seed, 2);
            let mut samples: Vec<[f64; 3]> = (0..n)
                .map(|_| [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)])
                .collect();
            let (m1, v1) = mean_and_variance(&samples).unwrap();
            samples.reverse();
            samples.rotate_left(n / 3);
            let (m2, v2) = mean_and_variance(&samples).unwrap();
            for d in 0..3 {
                prop_assert!((m1[d] - m2[d]).abs() < 1e-12);
                prop_assert!((v1[d] - v2[d]).abs() < 1e-10);
            }
        }
    }
}
