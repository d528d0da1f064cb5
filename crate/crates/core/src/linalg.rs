//! Symmetric positive definite matrices with a cached Cholesky factor.
//!
//! Every covariance, precision and scale matrix in the crate goes through
//! [`Spd`]. Inputs are symmetrized before factorization and rejected when the
//! smallest eigenvalue of the symmetrized matrix falls below
//! [`MIN_EIGENVALUE`]. Solves, quadratic forms and log-determinants all use the
//! triangular factor.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Smallest eigenvalue accepted by [`Spd::new`].
pub const MIN_EIGENVALUE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Spd {
    matrix: DMatrix<f64>,
    lower: DMatrix<f64>,
    log_det: f64,
}

impl Spd {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        Self::with_context(m, "spd")
    }

    /// Like [`Spd::new`], with a label that ends up in the error message.
    pub fn with_context(m: DMatrix<f64>, context: &'static str) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch {
                context,
                expected: m.nrows(),
                actual: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite {
                context,
                min_eigenvalue: f64::NAN,
            });
        }
        let sym = symmetrize(&m);
        let min_eig = min_eigenvalue(&sym);
        if !(min_eig >= MIN_EIGENVALUE) {
            return Err(Error::NotPositiveDefinite {
                context,
                min_eigenvalue: min_eig,
            });
        }
        let chol = sym.clone().cholesky().ok_or(Error::NotPositiveDefinite {
            context,
            min_eigenvalue: min_eig,
        })?;
        let lower = chol.unpack();
        let log_det = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self {
            matrix: sym,
            lower,
            log_det,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    /// `s * I`. Panics if `s` is not positive.
    pub fn scaled_identity(n: usize, s: f64) -> Self {
        assert!(s > 0.0, "scaled_identity needs a positive scale, got {s}");
        Self {
            matrix: DMatrix::identity(n, n) * s,
            lower: DMatrix::identity(n, n) * s.sqrt(),
            log_det: n as f64 * s.ln(),
        }
    }

    /// `c * self` without refactorizing. Panics if `c` is not positive.
    pub fn scaled(&self, c: f64) -> Self {
        assert!(c > 0.0 && c.is_finite(), "Spd::scaled needs a positive factor, got {c}");
        Self {
            matrix: &self.matrix * c,
            lower: &self.lower * c.sqrt(),
            log_det: self.log_det + self.dim() as f64 * c.ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = self`.
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `L⁻¹ v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        self.lower
            .solve_lower_triangular(v)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `L⁻¹ B` for a matrix right-hand side.
    pub fn whiten_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.lower
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `vᵀ self⁻¹ v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        self.whiten(v).norm_squared()
    }

    /// `self⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let z = self.whiten(v);
        self.lower
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `self⁻¹ B`.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let z = self.whiten_mat(b);
        self.lower
            .tr_solve_lower_triangular(&z)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `Tr[self⁻¹ X]`.
    pub fn trace_solve(&self, x: &DMatrix<f64>) -> f64 {
        self.solve_mat(x).trace()
    }

    /// Dense inverse, for reporting and for oracles. Internal algebra uses the
    /// solve methods instead.
    pub fn inverse(&self) -> DMatrix<f64> {
        symmetrize(&self.solve_mat(&DMatrix::identity(self.dim(), self.dim())))
    }
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    if sym.nrows() == 0 {
        return f64::INFINITY;
    }
    sym.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Cholesky-like factor of a positive semi-definite matrix: zero pivots give
/// zero columns instead of failing. Used for noise sampling where some
/// variances may be exactly zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let a = symmetrize(m);
    let mut l = DMatrix::<f64>::zeros(n, n);
    let scale = a.diagonal().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let tol = 1e-14 * scale.max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol {
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_singular_and_indefinite() {
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            Spd::new(sing),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Spd::new(indef).is_err());
        let tiny = DMatrix::from_diagonal_element(2, 2, 1e-11);
        assert!(Spd::new(tiny).is_err());
    }

    #[test]
    fn symmetrizes_before_factorizing() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5 + 1e-9, 0.5, 1.0]);
        let s = Spd::new(m).unwrap();
        assert_eq!(s.matrix()[(0, 1)], s.matrix()[(1, 0)]);
    }

    #[test]
    fn solves_and_log_det() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let s = Spd::new(m.clone()).unwrap();
        assert!((s.log_det() - m.determinant().ln()).abs() < 1e-12);
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = s.solve(&v);
        assert!((&m * &x - &v).norm() < 1e-12);
        let q = v.dot(&(&m.clone().try_inverse().unwrap() * &v));
        assert!((s.quad_form(&v) - q).abs() < 1e-12);
        let sc = s.scaled(3.0);
        assert!((sc.log_det() - (m * 3.0).determinant().ln()).abs() < 1e-12);
    }

    #[test]
    fn psd_factor_handles_zero_blocks() {
        let m = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0, 1.0, 1.0]);
        let l = psd_factor(&m);
        assert!((&l * l.transpose() - &m).norm() < 1e-12);
        assert!(l.column(0).iter().all(|v| *v == 0.0));
    }
}
