//! Gaussian, multivariate location-scale T and matrix-normal-Wishart
//! distributions, plus the closed-form information quantities used by the
//! expected-free-energy objective.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{check_dim, Error, Result};
use crate::linalg::Spd;

/// Multivariate Gaussian `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: Spd,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: Spd) -> Result<Self> {
        check_dim("gaussian covariance", mean.len(), cov.dim())?;
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_pdf(&self, y: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        let r = y - &self.mean;
        -0.5 * (d * (2.0 * PI).ln() + self.cov.log_det() + self.cov.quad_form(&r))
    }
}

/// Multivariate location-scale T distribution `T_η(μ, Σ)`.
///
/// `Σ` is the scale matrix, not the covariance; the covariance is
/// `Σ η/(η−2)` for `η > 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationScaleT {
    pub dof: f64,
    pub loc: DVector<f64>,
    pub scale: Spd,
}

impl LocationScaleT {
    pub fn new(dof: f64, loc: DVector<f64>, scale: Spd) -> Result<Self> {
        if !(dof > 0.0) || !dof.is_finite() {
            return Err(Error::InvalidDof { dof, min: 0.0 });
        }
        check_dim("t scale", loc.len(), scale.dim())?;
        Ok(Self { dof, loc, scale })
    }

    pub fn dim(&self) -> usize {
        self.loc.len()
    }

    /// Log normalizing constant, everything except the kernel
    /// `−(η+D)/2 ln(1 + δᵀΣ⁻¹δ/η)`.
    pub fn log_normalizer(&self) -> f64 {
        let d = self.dim() as f64;
        let eta = self.dof;
        ln_gamma(0.5 * (eta + d)) - ln_gamma(0.5 * eta) - 0.5 * d * (eta * PI).ln()
            - 0.5 * self.scale.log_det()
    }

    pub fn log_pdf(&self, y: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        let r = y - &self.loc;
        let q = self.scale.quad_form(&r);
        self.log_normalizer() - 0.5 * (self.dof + d) * (q / self.dof).ln_1p()
    }

    /// Covariance `Σ η/(η−2)`; requires `η > 2`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if !(self.dof > 2.0) {
            return Err(Error::MomentUndefined { dof: self.dof });
        }
        Ok(self.scale.matrix() * (self.dof / (self.dof - 2.0)))
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        let d = self.dim() as f64;
        let eta = self.dof;
        0.5 * d * (eta * PI).ln() - ln_gamma(0.5 * d)
            + ln_beta(0.5 * d, 0.5 * eta)
            + 0.5 * (eta + d) * (digamma(0.5 * (eta + d)) - digamma(0.5 * eta))
            + 0.5 * self.scale.log_det()
    }

    /// `E_T[−ln N(y | g.mean, g.cov)]`; requires `η > 2`.
    pub fn cross_entropy_to(&self, g: &Gaussian) -> Result<f64> {
        check_dim("goal dimension", self.dim(), g.dim())?;
        let cov = self.covariance()?;
        let r = &self.loc - &g.mean;
        let d = self.dim() as f64;
        let spread = g.cov.trace_solve(&cov) + g.cov.quad_form(&r);
        Ok(0.5 * (d * (2.0 * PI).ln() + g.cov.log_det()) + 0.5 * spread)
    }
}

/// `ln T_η(y | μ, Σ)`.
pub fn t_log_pdf(d: &LocationScaleT, y: &DVector<f64>) -> Result<f64> {
    check_dim("t_log_pdf argument", d.dim(), y.len())?;
    Ok(d.log_pdf(y))
}

/// Entropy of a location-scale T distribution.
pub fn t_entropy(d: &LocationScaleT) -> f64 {
    d.entropy()
}

/// Cross-entropy from a T predictive to a Gaussian goal.
pub fn gaussian_cross_entropy_from_t(d: &LocationScaleT, g: &Gaussian) -> Result<f64> {
    d.cross_entropy_to(g)
}

/// Multivariate log-gamma `ln Γ_p(a)`.
pub fn ln_multigamma(p: usize, a: f64) -> f64 {
    let pf = p as f64;
    0.25 * pf * (pf - 1.0) * PI.ln()
        + (1..=p)
            .map(|j| ln_gamma(a + 0.5 * (1.0 - j as f64)))
            .sum::<f64>()
}

/// Matrix-normal-Wishart over a coefficient matrix `A` (D_x×D_y) and a
/// precision `W` (D_y×D_y):
///
/// ```text
/// MNW(A, W | M, Λ⁻¹, Ω⁻¹, ν) = MN(A | M, Λ⁻¹, W⁻¹) · W(W | Ω⁻¹, ν)
/// ```
///
/// `Λ` is the row precision and `Ω` the inverse Wishart scale, so
/// `E[W] = ν Ω⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixNormalWishart {
    pub mean: DMatrix<f64>,
    pub row_precision: Spd,
    pub scale: Spd,
    pub dof: f64,
}

impl MatrixNormalWishart {
    pub fn new(mean: DMatrix<f64>, row_precision: Spd, scale: Spd, dof: f64) -> Result<Self> {
        check_dim("mnw row precision", mean.nrows(), row_precision.dim())?;
        check_dim("mnw scale", mean.ncols(), scale.dim())?;
        let min = mean.ncols() as f64 - 1.0;
        if !(dof > min) || !dof.is_finite() {
            return Err(Error::InvalidDof { dof, min });
        }
        Ok(Self {
            mean,
            row_precision,
            scale,
            dof,
        })
    }

    /// Rows of `A`, i.e. the regressor dimension.
    pub fn dx(&self) -> usize {
        self.mean.nrows()
    }

    /// Columns of `A`, i.e. the output dimension.
    pub fn dy(&self) -> usize {
        self.mean.ncols()
    }

    fn check_args(&self, a: Option<&DMatrix<f64>>, w: &DMatrix<f64>) -> Result<()> {
        if let Some(a) = a {
            check_dim("coefficient rows", self.dx(), a.nrows())?;
            check_dim("coefficient cols", self.dy(), a.ncols())?;
        }
        check_dim("precision rows", self.dy(), w.nrows())?;
        check_dim("precision cols", self.dy(), w.ncols())
    }

    /// `ln MN(A | M, Λ⁻¹, W⁻¹)`.
    pub fn mn_log_pdf(&self, a: &DMatrix<f64>, w: &Spd) -> Result<f64> {
        self.check_args(Some(a), w.matrix())?;
        let (dx, dy) = (self.dx() as f64, self.dy() as f64);
        let r = a - &self.mean;
        // Tr[W Rᵀ Λ R]
        let lr = self.row_precision.matrix() * &r;
        let inner = r.transpose() * lr;
        let tr = (w.matrix() * inner).trace();
        Ok(-0.5 * tr - 0.5 * dx * dy * (2.0 * PI).ln()
            + 0.5 * dy * self.row_precision.log_det()
            + 0.5 * dx * w.log_det())
    }

    /// `ln W(W | Ω⁻¹, ν)`.
    pub fn wishart_log_pdf(&self, w: &Spd) -> Result<f64> {
        self.check_args(None, w.matrix())?;
        let d = self.dy();
        let df = d as f64;
        let nu = self.dof;
        let tr = (self.scale.matrix() * w.matrix()).trace();
        Ok(0.5 * (nu - df - 1.0) * w.log_det() - 0.5 * tr - 0.5 * nu * df * 2f64.ln()
            + 0.5 * nu * self.scale.log_det()
            - ln_multigamma(d, 0.5 * nu))
    }

    pub fn log_pdf(&self, a: &DMatrix<f64>, w: &Spd) -> Result<f64> {
        Ok(self.mn_log_pdf(a, w)? + self.wishart_log_pdf(w)?)
    }
}

/// `ln MNW(A, W | M, Λ⁻¹, Ω⁻¹, ν)`.
pub fn mnw_log_pdf(d: &MatrixNormalWishart, a: &DMatrix<f64>, w: &Spd) -> Result<f64> {
    d.log_pdf(a, w)
}
