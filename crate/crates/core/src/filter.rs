//! Conjugate Bayesian filtering for the MARX model
//! `y_k ~ N(Aᵀ x_k, W⁻¹)` with `x_k = [u_k; ū_k; ȳ_k]`.
//!
//! Beliefs over `(A, W)` stay matrix-normal-Wishart. Each observation
//! contributes an improper likelihood message which, multiplied with the
//! current posterior, gives the next posterior exactly. Marginalizing the
//! likelihood over the posterior gives a location-scale T predictive.
//!
//! Buffers and beliefs are separate values: the planner rolls buffers
//! forward with predicted outputs without touching the beliefs.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::distributions::{LocationScaleT, MatrixNormalWishart};
use crate::error::{check_dim, Error, Result};
use crate::linalg::Spd;

/// Diagonal jitter added to `Ω` when its first factorization fails.
pub const OMEGA_JITTER: f64 = 1e-10;

/// Input/output dimensions and memory lengths of a MARX model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub du: usize,
    pub dy: usize,
    pub mem_u: usize,
    pub mem_y: usize,
}

impl ModelDims {
    pub fn new(du: usize, dy: usize, mem_u: usize, mem_y: usize) -> Self {
        Self {
            du,
            dy,
            mem_u,
            mem_y,
        }
    }

    /// `D_x = D_u (M_u + 1) + D_y M_y`.
    pub fn dx(&self) -> usize {
        self.du * (self.mem_u + 1) + self.dy * self.mem_y
    }

    /// Offset of `ȳ` inside the regressor.
    pub fn y_offset(&self) -> usize {
        self.du * (self.mem_u + 1)
    }
}

/// Sliding memories of past controls and outputs, most recent first.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffers {
    dims: ModelDims,
    u_hist: VecDeque<DVector<f64>>,
    y_hist: VecDeque<DVector<f64>>,
}

impl Buffers {
    /// All-zero memories.
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            dims,
            u_hist: (0..dims.mem_u).map(|_| DVector::zeros(dims.du)).collect(),
            y_hist: (0..dims.mem_y).map(|_| DVector::zeros(dims.dy)).collect(),
        }
    }

    /// Builds buffers from explicit histories (most recent first).
    pub fn from_history(
        dims: ModelDims,
        u_hist: Vec<DVector<f64>>,
        y_hist: Vec<DVector<f64>>,
    ) -> Result<Self> {
        check_dim("control history length", dims.mem_u, u_hist.len())?;
        check_dim("output history length", dims.mem_y, y_hist.len())?;
        for u in &u_hist {
            check_dim("control history entry", dims.du, u.len())?;
        }
        for y in &y_hist {
            check_dim("output history entry", dims.dy, y.len())?;
        }
        Ok(Self {
            dims,
            u_hist: u_hist.into(),
            y_hist: y_hist.into(),
        })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn u_hist(&self) -> &VecDeque<DVector<f64>> {
        &self.u_hist
    }

    pub fn y_hist(&self) -> &VecDeque<DVector<f64>> {
        &self.y_hist
    }

    /// Shifts `u` and `y` in as the newest entries, dropping the oldest.
    pub fn push(&mut self, u: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
        check_dim("pushed control", self.dims.du, u.len())?;
        check_dim("pushed output", self.dims.dy, y.len())?;
        if self.dims.mem_u > 0 {
            self.u_hist.pop_back();
            self.u_hist.push_front(u.clone());
        }
        if self.dims.mem_y > 0 {
            self.y_hist.pop_back();
            self.y_hist.push_front(y.clone());
        }
        Ok(())
    }

    /// Overwrites the output slot `index` (0 = most recent).
    pub fn set_output(&mut self, index: usize, y: &DVector<f64>) -> Result<()> {
        check_dim("output slot", self.dims.dy, y.len())?;
        match self.y_hist.get_mut(index) {
            Some(slot) => {
                slot.copy_from(y);
                Ok(())
            }
            None => Err(Error::DimensionMismatch {
                context: "output slot index",
                expected: self.dims.mem_y,
                actual: index,
            }),
        }
    }
}

/// `push_buffers`: the buffers after observing `(u, y)`.
pub fn push_buffers(buf: &Buffers, u: &DVector<f64>, y: &DVector<f64>) -> Result<Buffers> {
    let mut next = buf.clone();
    next.push(u, y)?;
    Ok(next)
}

/// Stacked regressor `x = [u; ū; ȳ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorVector(DVector<f64>);

impl RegressorVector {
    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn make_regressor(u: &DVector<f64>, buf: &Buffers) -> Result<RegressorVector> {
    let dims = buf.dims();
    check_dim("control", dims.du, u.len())?;
    let mut x = DVector::zeros(dims.dx());
    x.rows_mut(0, dims.du).copy_from(u);
    let mut off = dims.du;
    for past in buf.u_hist() {
        x.rows_mut(off, dims.du).copy_from(past);
        off += dims.du;
    }
    for past in buf.y_hist() {
        x.rows_mut(off, dims.dy).copy_from(past);
        off += dims.dy;
    }
    Ok(RegressorVector(x))
}

/// Likelihood-shaped MNW factor of a single observation. Its `Ω̄` is zero,
/// so it is only meaningful as a multiplicative update to a proper prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ImproperLikelihoodMessage {
    pub dof: f64,
    pub row_precision: DMatrix<f64>,
    pub mean: DMatrix<f64>,
    pub scale: DMatrix<f64>,
}

pub fn likelihood_message(x: &RegressorVector, y: &DVector<f64>) -> ImproperLikelihoodMessage {
    let x = x.as_vector();
    let (dx, dy) = (x.len(), y.len());
    let xx = x * x.transpose();
    // (x xᵀ)⁺ x yᵀ = x yᵀ / ‖x‖², zero for x = 0
    let nrm2 = x.norm_squared();
    let mean = if nrm2 > 0.0 {
        x * y.transpose() / nrm2
    } else {
        DMatrix::zeros(dx, dy)
    };
    ImproperLikelihoodMessage {
        dof: 2.0 - dx as f64 + dy as f64,
        row_precision: xx,
        mean,
        scale: DMatrix::zeros(dy, dy),
    }
}

/// Parameter beliefs of a MARX model.
#[derive(Debug, Clone, PartialEq)]
pub struct MarxBeliefs {
    pub posterior: MatrixNormalWishart,
    dims: ModelDims,
}

impl MarxBeliefs {
    pub fn new(dims: ModelDims, posterior: MatrixNormalWishart) -> Result<Self> {
        check_dim("belief rows (D_x)", dims.dx(), posterior.dx())?;
        check_dim("belief cols (D_y)", dims.dy, posterior.dy())?;
        Ok(Self { posterior, dims })
    }

    /// Isotropic prior `M₀ = m·I_{Dx×Dy}`, `Λ₀ = l·I`, `Ω₀ = o·I`.
    pub fn isotropic(dims: ModelDims, dof: f64, mean_scale: f64, lambda: f64, omega: f64) -> Result<Self> {
        let mean = DMatrix::from_fn(dims.dx(), dims.dy, |i, j| if i == j { mean_scale } else { 0.0 });
        let post = MatrixNormalWishart::new(
            mean,
            Spd::scaled_identity(dims.dx(), lambda),
            Spd::scaled_identity(dims.dy, omega),
            dof,
        )?;
        Self::new(dims, post)
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn dof(&self) -> f64 {
        self.posterior.dof
    }

    /// Predictive degrees of freedom `ν − D_y + 1`.
    pub fn predictive_dof(&self) -> f64 {
        self.posterior.dof - self.dims.dy as f64 + 1.0
    }

    /// Conjugate update with a known regressor.
    pub fn updated_with(&self, x: &RegressorVector, y: &DVector<f64>) -> Result<Self> {
        check_dim("regressor", self.dims.dx(), x.len())?;
        check_dim("output", self.dims.dy, y.len())?;
        let msg = likelihood_message(x, y);
        let post = &self.posterior;
        let xv = x.as_vector();

        let dof = post.dof + msg.dof + self.dims.dx() as f64 - self.dims.dy as f64 - 1.0;
        let lambda = Spd::with_context(post.row_precision.matrix() + &msg.row_precision, "Λ update")?;
        let rhs = post.row_precision.matrix() * &post.mean + xv * y.transpose();
        let mean = lambda.solve_mat(&rhs);

        // Ω + yyᵀ + M₀ᵀΛ₀M₀ − MᵀΛM, written as a product of the prior and
        // posterior residuals.
        let prior_resid = y - post.mean.transpose() * xv;
        let post_resid = y - mean.transpose() * xv;
        let omega_raw = post.scale.matrix() + post_resid * prior_resid.transpose();
        let scale = match Spd::with_context(omega_raw.clone(), "Ω update") {
            Ok(s) => s,
            Err(_) => {
                let jittered = &omega_raw + DMatrix::identity(self.dims.dy, self.dims.dy) * OMEGA_JITTER;
                Spd::with_context(jittered, "Ω update").map_err(|e| {
                    Error::NumericalBreakdown(format!("Ω lost positive definiteness after jitter: {e}"))
                })?
            }
        };
        let posterior = MatrixNormalWishart::new(mean, lambda, scale, dof)?;
        Ok(Self {
            posterior,
            dims: self.dims,
        })
    }

    /// Location-scale T predictive for a known regressor.
    pub fn predictive_at(&self, x: &RegressorVector) -> Result<LocationScaleT> {
        check_dim("regressor", self.dims.dx(), x.len())?;
        let eta = self.predictive_dof();
        if !(eta > 0.0) {
            return Err(Error::InvalidDof { dof: eta, min: 0.0 });
        }
        let post = &self.posterior;
        let xv = x.as_vector();
        let loc = post.mean.transpose() * xv;
        let spread = 1.0 + post.row_precision.quad_form(xv);
        let scale = post.scale.scaled(spread / eta);
        debug_assert!(
            crate::linalg::min_eigenvalue(scale.matrix()) > 0.0,
            "predictive scale must stay positive definite"
        );
        LocationScaleT::new(eta, loc, scale)
    }
}

/// One conjugate filtering step; buffers are not modified.
pub fn update_beliefs(
    b: &MarxBeliefs,
    u: &DVector<f64>,
    y: &DVector<f64>,
    buf: &Buffers,
) -> Result<MarxBeliefs> {
    let x = make_regressor(u, buf)?;
    b.updated_with(&x, y)
}

/// Posterior predictive `p(y | u, D)` with the buffers current at prediction
/// time.
pub fn posterior_predictive(b: &MarxBeliefs, u: &DVector<f64>, buf: &Buffers) -> Result<LocationScaleT> {
    let x = make_regressor(u, buf)?;
    b.predictive_at(&x)
}

/// `−ln p(y | u, D)` under the pre-update beliefs.
pub fn negative_log_evidence(
    b: &MarxBeliefs,
    u: &DVector<f64>,
    y: &DVector<f64>,
    buf: &Buffers,
) -> Result<f64> {
    let pred = posterior_predictive(b, u, buf)?;
    check_dim("observed output", pred.dim(), y.len())?;
    Ok(-pred.log_pdf(y))
}
