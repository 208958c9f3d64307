//! Small dense-matrix and vector helpers shared across modules.
//!
//! The per-agent constraint blocks are tiny (a handful of rows and columns),
//! so a plain row-major matrix keeps the hot loops allocation-free and the
//! serialized form obvious. Anything genuinely dense-linear-algebraic
//! (eigenvalues, spectral norms) goes through [`nalgebra`] instead.

use serde::{Deserialize, Serialize};

/// Row-major dense matrix with explicit dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data. `data.len()` must equal
    /// `rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data length mismatch");
        Self { rows, cols, data }
    }

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
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = M v`. Panics on dimension mismatch.
    pub fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for (r, slot) in out.iter_mut().enumerate() {
            *slot = dot(self.row(r), v);
        }
    }

    /// `out += s * (M v)`.
    pub fn mul_vec_acc(&self, v: &[f64], s: f64, out: &mut [f64]) {
        assert_eq!(v.len(), self.cols);
        assert_eq!(out.len(), self.rows);
        for (r, slot) in out.iter_mut().enumerate() {
            *slot += s * dot(self.row(r), v);
        }
    }

    /// `out = Mᵀ v`.
    pub fn tr_mul_vec(&self, v: &[f64], out: &mut [f64]) {
        assert_eq!(v.len(), self.rows);
        assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for r in 0..self.rows {
            let vr = v[r];
            if vr == 0.0 {
                continue;
            }
            for (c, slot) in out.iter_mut().enumerate() {
                *slot += self.get(r, c) * vr;
            }
        }
    }

    /// `out += s * (Mᵀ v)`.
    pub fn tr_mul_vec_acc(&self, v: &[f64], s: f64, out: &mut [f64]) {
        assert_eq!(v.len(), self.rows);
        assert_eq!(out.len(), self.cols);
        for r in 0..self.rows {
            let vr = s * v[r];
            if vr == 0.0 {
                continue;
            }
            for (c, slot) in out.iter_mut().enumerate() {
                *slot += self.get(r, c) * vr;
            }
        }
    }

    /// Induced 1-norm: maximum absolute column sum.
    pub fn max_abs_col_sum(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.get(r, c).abs()).sum())
            .fold(0.0, f64::max)
    }

    /// Induced infinity norm: maximum absolute row sum.
    pub fn max_abs_row_sum(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|v| v.abs()).sum())
            .fold(0.0, f64::max)
    }

    pub fn is_consistent(&self) -> bool {
        self.data.len() == self.rows * self.cols && self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_nalgebra(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Euclidean distance between two equal-length slices.
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mul_vec_matches_hand_computation() {
        let m = DenseMatrix::from_row_major(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut out = vec![0.0; 2];
        m.mul_vec(&[1.0, 0.0, -1.0], &mut out);
        assert_eq!(out, vec![-2.0, -2.0]);
    }

    #[test]
    fn tr_mul_vec_matches_transpose() {
        let m = DenseMatrix::from_row_major(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut out = vec![0.0; 3];
        m.tr_mul_vec(&[2.0, -1.0], &mut out);
        assert_eq!(out, vec![-2.0, -1.0, 0.0]);
    }

    #[test]
    fn induced_norms() {
        let m = DenseMatrix::from_row_major(2, 2, vec![1.0, -3.0, 2.0, 1.0]);
        assert_abs_diff_eq!(m.max_abs_col_sum(), 4.0);
        assert_abs_diff_eq!(m.max_abs_row_sum(), 4.0);
    }

    #[test]
    fn identity_roundtrip() {
        let m = DenseMatrix::identity(3);
        let v = vec![0.5, -1.5, 2.0];
        let mut out = vec![0.0; 3];
        m.mul_vec(&v, &mut out);
        assert_eq!(out, v);
        assert!(m.is_consistent());
    }
}

/// Dominant eigenvalue of a positive semidefinite matrix by power
/// iteration with a deterministic start vector. Convergence is checked on
/// the Rayleigh quotient.
fn power_dominant(m: &nalgebra::DMatrix<f64>) -> f64 {
    let n = m.nrows();
    assert!(
        n > 0 && m.ncols() == n,
        "power iteration needs a square matrix"
    );
    // Start vector with unequal components so it is not orthogonal to the
    // dominant eigenvector of any fixed matrix by accident of symmetry.
    let mut v =
        nalgebra::DVector::from_iterator(n, (0..n).map(|i| 1.0 + i as f64 / (n as f64 + 1.0)));
    v /= v.norm();
    let mut lambda = 0.0f64;
    for _ in 0..20_000 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-13 * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Row-sum bound on the spectral radius (Gershgorin).
fn radius_bound(m: &nalgebra::DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Extreme eigenvalues (min, max) of a symmetric matrix, from the full
/// dense symmetric eigendecomposition. Power iteration is no use here:
/// after shifting, neighboring eigenvalues of the preconditioner differ
/// by fractions of a percent and the iteration stalls for thousands of
/// rounds.
pub fn sym_extreme_eigs(m: &nalgebra::DMatrix<f64>) -> (f64, f64) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "matrix must be square");
    let scale = radius_bound(m).max(1e-300);
    for i in 0..n {
        for j in (i + 1)..n {
            assert!(
                (m[(i, j)] - m[(j, i)]).abs() <= 1e-8 * scale,
                "matrix must be symmetric (entry ({i},{j}))"
            );
        }
    }
    let eigs = m.clone().symmetric_eigen().eigenvalues;
    (eigs.min(), eigs.max())
}

/// Spectral norm (largest singular value) of a possibly nonsymmetric
/// matrix, via power iteration on the Gram matrix.
pub fn spectral_norm(m: &nalgebra::DMatrix<f64>) -> f64 {
    let gram = m.transpose() * m;
    power_dominant(&gram).max(0.0).sqrt()
}

#[cfg(test)]
mod eig_tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_extremes_are_exact() {
        let m = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![
            -3.0, 0.5, 7.0, 2.0,
        ]));
        let (lo, hi) = sym_extreme_eigs(&m);
        assert_abs_diff_eq!(lo, -3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(hi, 7.0, epsilon = 1e-9);
    }

    /// Shift-and-power extremes: with s bounding the spectral radius,
    /// M + sI and sI - M are positive semidefinite and their dominant
    /// eigenvalues recover the extremes. Slow but algorithmically
    /// unrelated to the tridiagonal QR path under test.
    fn shifted_power_extremes(m: &nalgebra::DMatrix<f64>) -> (f64, f64) {
        let n = m.nrows();
        let s = radius_bound(m).max(1e-300);
        let eye = nalgebra::DMatrix::identity(n, n);
        let hi = power_dominant(&(m + &eye * s)) - s;
        let lo = s - power_dominant(&(&eye * s - m));
        (lo, hi)
    }

    #[test]
    fn random_symmetric_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let n = 30;
            let raw = nalgebra::DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let sym = (&raw + raw.transpose()) * 0.5;
            let (want_lo, want_hi) = shifted_power_extremes(&sym);
            let (lo, hi) = sym_extreme_eigs(&sym);
            assert_abs_diff_eq!(lo, want_lo, epsilon = 1e-7 * want_hi.abs().max(1.0));
            assert_abs_diff_eq!(hi, want_hi, epsilon = 1e-7 * want_hi.abs().max(1.0));
        }
    }

    #[test]
    fn spectral_norm_hand_value() {
        let m = nalgebra::DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 4.0, 0.0]);
        assert_abs_diff_eq!(spectral_norm(&m), 5.0, epsilon = 1e-10);
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = nalgebra::DMatrix::from_fn(12, 8, |_, _| rng.random_range(-2.0..2.0));
        let svd = m.clone().svd(false, false);
        let want = svd.singular_values.max();
        assert_abs_diff_eq!(spectral_norm(&m), want, epsilon = 1e-8 * want);
    }
}
