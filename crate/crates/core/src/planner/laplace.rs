//! Backward predictive messages and Laplace-approximated intermediate goals.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

use crate::distributions::{Gaussian, LocationScaleT};
use crate::error::{check_dim, Error, Result};
use crate::filter::{make_regressor, Buffers, MarxBeliefs};
use crate::linalg::Spd;

use super::GoalPrior;

/// A log-density factor over an output `y` with analytic derivatives.
pub trait LogFactor {
    fn dim(&self) -> usize;

    fn log_density(&self, y: &DVector<f64>) -> f64;

    /// Value, gradient and Hessian at `y`.
    fn derivatives(&self, y: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>);

    /// A point the factor prefers, used as an extra optimizer start.
    fn preferred_point(&self) -> Option<DVector<f64>> {
        None
    }
}

/// Constant factor.
#[derive(Debug, Clone, Copy)]
pub struct Flat(pub usize);

impl LogFactor for Flat {
    fn dim(&self) -> usize {
        self.0
    }

    fn log_density(&self, _y: &DVector<f64>) -> f64 {
        0.0
    }

    fn derivatives(&self, _y: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        (0.0, DVector::zeros(self.0), DMatrix::zeros(self.0, self.0))
    }
}

/// `ln T_η(r(y) | 0, Σ₀ s(y))` with an affine residual `r(y) = r₀ + R y` and
/// a quadratic spread `s(y) = 1 + ‖z₀ + Z y‖²` (or `s ≡ 1`).
///
/// Both the forward predictive (as a density over `y`) and the backward
/// message (the future pseudo-observation scored as a function of `y`) take
/// this form.
#[derive(Debug, Clone)]
struct AffineT {
    dof: f64,
    dim_out: usize,
    log_norm: f64,
    w0: DVector<f64>,
    w_lin: DMatrix<f64>,
    spread: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl AffineT {
    fn new(
        dof: f64,
        base_scale: &Spd,
        r0: &DVector<f64>,
        r_lin: &DMatrix<f64>,
        spread: Option<(DVector<f64>, DMatrix<f64>)>,
    ) -> Self {
        let d = base_scale.dim() as f64;
        let log_norm = ln_gamma(0.5 * (dof + d)) - ln_gamma(0.5 * dof) - 0.5 * d * (dof * PI).ln()
            - 0.5 * base_scale.log_det();
        Self {
            dof,
            dim_out: base_scale.dim(),
            log_norm,
            w0: base_scale.whiten(r0),
            w_lin: base_scale.whiten_mat(r_lin),
            spread,
        }
    }

    fn eval(&self, y: &DVector<f64>, with_derivs: bool) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = y.len();
        let d = self.dim_out as f64;
        let eta = self.dof;
        let w = &self.w0 + &self.w_lin * y;
        let q = w.norm_squared();
        let (s, ds, dds) = match &self.spread {
            Some((z0, zl)) => {
                let z = z0 + zl * y;
                let s = 1.0 + z.norm_squared();
                if with_derivs {
                    (s, zl.transpose() * &z * 2.0, zl.transpose() * zl * 2.0)
                } else {
                    (s, DVector::zeros(0), DMatrix::zeros(0, 0))
                }
            }
            None => (1.0, DVector::zeros(n), DMatrix::zeros(n, n)),
        };
        let g = q / (eta * s);
        let value = self.log_norm - 0.5 * d * s.ln() - 0.5 * (eta + d) * g.ln_1p();
        if !with_derivs {
            return (value, DVector::zeros(0), DMatrix::zeros(0, 0));
        }
        let dq = self.w_lin.transpose() * &w * 2.0;
        let ddq = self.w_lin.transpose() * &self.w_lin * 2.0;
        let dg = (&dq * s - &ds * q) / (eta * s * s);
        let ddg = (&ddq / s - (&dq * ds.transpose() + &ds * dq.transpose()) / (s * s) - &dds * (q / (s * s))
            + (&ds * ds.transpose()) * (2.0 * q / (s * s * s)))
            / eta;
        let grad = -&ds * (0.5 * d / s) - &dg * (0.5 * (eta + d) / (1.0 + g));
        let hess = -(&dds / s - (&ds * ds.transpose()) / (s * s)) * (0.5 * d)
            - (&ddg / (1.0 + g) - (&dg * dg.transpose()) / ((1.0 + g) * (1.0 + g))) * (0.5 * (eta + d));
        (value, grad, hess)
    }
}

impl LogFactor for LocationScaleT {
    fn dim(&self) -> usize {
        LocationScaleT::dim(self)
    }

    fn log_density(&self, y: &DVector<f64>) -> f64 {
        self.log_pdf(y)
    }

    fn derivatives(&self, y: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = LocationScaleT::dim(self);
        AffineT::new(self.dof, &self.scale, &-&self.loc, &DMatrix::identity(n, n), None).eval(y, true)
    }

    fn preferred_point(&self) -> Option<DVector<f64>> {
        Some(self.loc.clone())
    }
}

/// Backward message from the node at `t+1` towards `y_t`:
/// `y_t ↦ ln T_η̄(m_{t+1} | μ̄(y_t), Σ̄(y_t))`, where the regressor of step
/// `t+1` carries `y_t` in one of its output slots.
#[derive(Debug, Clone)]
pub struct BackwardMessage {
    dof: f64,
    target: DVector<f64>,
    coeffs: DMatrix<f64>,
    row_precision: Spd,
    base_scale: Spd,
    template: DVector<f64>,
    hole_offset: usize,
    form: AffineT,
}

impl BackwardMessage {
    pub fn dof(&self) -> f64 {
        self.dof
    }

    /// Regressor of step `t+1` with `y` in the hole.
    pub fn regressor(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut x = self.template.clone();
        x.rows_mut(self.hole_offset, y.len()).copy_from(y);
        x
    }

    /// `T_η̄(μ̄(y), Σ̄(y))`, the distribution the pseudo-observation is scored
    /// under.
    pub fn predictive_given(&self, y: &DVector<f64>) -> Result<LocationScaleT> {
        let x = self.regressor(y);
        let loc = self.coeffs.transpose() * &x;
        let spread = 1.0 + self.row_precision.quad_form(&x);
        LocationScaleT::new(self.dof, loc, self.base_scale.scaled(spread))
    }
}

impl LogFactor for BackwardMessage {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn log_density(&self, y: &DVector<f64>) -> f64 {
        self.form.eval(y, false).0
    }

    fn derivatives(&self, y: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        self.form.eval(y, true)
    }

    fn preferred_point(&self) -> Option<DVector<f64>> {
        // y_t that makes the backward mean hit the target exactly
        let dy = self.target.len();
        let block = self.coeffs.rows(self.hole_offset, dy).transpose().into_owned();
        let mut x0 = self.template.clone();
        x0.rows_mut(self.hole_offset, dy).fill(0.0);
        let rhs = &self.target - self.coeffs.transpose() * x0;
        block.lu().solve(&rhs).filter(|y| y.iter().all(|v| v.is_finite()))
    }
}

/// Builds the backward message for the free output slot `hole` of
/// `buf_next` (the buffers of step `t+1`); that slot's stored value is
/// ignored.
pub fn backward_message(
    b: &MarxBeliefs,
    future_mean: &DVector<f64>,
    u_next: &DVector<f64>,
    buf_next: &Buffers,
    hole: usize,
) -> Result<BackwardMessage> {
    let dims = b.dims();
    check_dim("future mean", dims.dy, future_mean.len())?;
    if hole >= dims.mem_y {
        return Err(Error::DimensionMismatch {
            context: "backward message hole position",
            expected: dims.mem_y,
            actual: hole,
        });
    }
    let dof = b.predictive_dof();
    if !(dof > 0.0) {
        return Err(Error::InvalidDof { dof, min: 0.0 });
    }
    let post = &b.posterior;
    let hole_offset = dims.y_offset() + hole * dims.dy;
    let mut template = make_regressor(u_next, buf_next)?.into_vector();
    template.rows_mut(hole_offset, dims.dy).fill(0.0);

    let base_scale = post.scale.scaled(1.0 / dof);
    let mut selector = DMatrix::zeros(dims.dx(), dims.dy);
    for i in 0..dims.dy {
        selector[(hole_offset + i, i)] = 1.0;
    }
    let r0 = future_mean - post.mean.transpose() * &template;
    let r_lin = -(post.mean.transpose() * &selector);
    let spread = (
        post.row_precision.whiten(&template),
        post.row_precision.whiten_mat(&selector),
    );
    let form = AffineT::new(dof, &base_scale, &r0, &r_lin, Some(spread));
    Ok(BackwardMessage {
        dof,
        target: future_mean.clone(),
        coeffs: post.mean.clone(),
        row_precision: post.row_precision.clone(),
        base_scale,
        template,
        hole_offset,
        form,
    })
}

/// How a Laplace goal was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaplaceStatus {
    Converged,
    /// Newton stopped on its iteration budget; the curvature is still taken
    /// at the best point found.
    IterationLimit,
    /// The curvature at the optimum was not negative definite; the forward
    /// message's own moment-matched Gaussian was returned instead.
    MomentFallback,
}

const NEWTON_ITERS: usize = 100;

fn newton_ascent(
    fwd: &dyn LogFactor,
    bwd: &dyn LogFactor,
    start: &DVector<f64>,
) -> (DVector<f64>, f64, bool) {
    let eval = |y: &DVector<f64>| fwd.log_density(y) + bwd.log_density(y);
    let mut y = start.clone();
    let mut fy = eval(&y);
    for _ in 0..NEWTON_ITERS {
        let (_, g1, h1) = fwd.derivatives(&y);
        let (_, g2, h2) = bwd.derivatives(&y);
        let g = g1 + g2;
        let neg_h = -(h1 + h2);
        let step = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => {
                // gradient step scaled by the largest curvature magnitude
                let scale = neg_h.abs().max().max(1e-12);
                &g / scale
            }
        };
        let mut alpha = 1.0;
        let mut improved = None;
        for _ in 0..60 {
            let trial = &y + &step * alpha;
            let ft = eval(&trial);
            if ft.is_finite() && ft >= fy {
                improved = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, fnext)) = improved else {
            return (y, fy, true);
        };
        let moved = (&next - &y).amax();
        let tol = 1e-13 * (1.0 + y.amax());
        y = next;
        fy = fnext;
        if moved <= tol {
            return (y, fy, true);
        }
    }
    (y, fy, false)
}

/// Gaussian approximation `N(m, S)` of the normalized product
/// `fwd(y)·exp(bwd(y))`: `m` maximizes the log product and `S⁻¹` is its
/// negative Hessian there.
pub fn laplace_goal(fwd: &LocationScaleT, bwd: &dyn LogFactor) -> Result<(GoalPrior, LaplaceStatus)> {
    check_dim("backward message", fwd.dim(), bwd.dim())?;
    let mut starts = vec![fwd.loc.clone()];
    if let Some(p) = bwd.preferred_point() {
        starts.push(&(&fwd.loc + &p) * 0.5);
        starts.push(p);
    }
    let mut best: Option<(DVector<f64>, f64, bool)> = None;
    for s in &starts {
        let r = newton_ascent(fwd, bwd, s);
        if r.1.is_finite() && best.as_ref().map_or(true, |b| r.1 > b.1) {
            best = Some(r);
        }
    }
    let Some((mode, _, converged)) = best else {
        return Err(Error::NumericalBreakdown("laplace objective is not finite".into()));
    };
    let (_, _, h1) = fwd.derivatives(&mode);
    let (_, _, h2) = bwd.derivatives(&mode);
    let precision = -(h1 + h2);
    let cov = Spd::with_context(precision, "laplace precision")
        .and_then(|p| Spd::with_context(p.inverse(), "laplace covariance"));
    match cov {
        Ok(cov) => {
            let status = if converged {
                LaplaceStatus::Converged
            } else {
                LaplaceStatus::IterationLimit
            };
            Ok((Gaussian::new(mode, cov)?, status))
        }
        Err(e) => {
            log::warn!("laplace curvature not usable ({e}); falling back to forward moments");
            let cov = Spd::with_context(fwd.covariance()?, "forward moment fallback")?;
            Ok((Gaussian::new(fwd.loc.clone(), cov)?, LaplaceStatus::MomentFallback))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::oracle;
    use crate::filter::ModelDims;

    fn fd_check(f: &dyn LogFactor, y: &DVector<f64>) {
        let (v, g, h) = f.derivatives(y);
        assert!((v - f.log_density(y)).abs() < 1e-10);
        let n = y.len();
        let step = 1e-5;
        for i in 0..n {
            let mut p = y.clone();
            p[i] += step;
            let mut m = y.clone();
            m[i] -= step;
            let fd = (f.log_density(&p) - f.log_density(&m)) / (2.0 * step);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "grad {i}: {fd} vs {}", g[i]);
            let (_, gp, _) = f.derivatives(&p);
            let (_, gm, _) = f.derivatives(&m);
            for j in 0..n {
                let fdh = (gp[j] - gm[j]) / (2.0 * step);
                assert!((fdh - h[(j, i)]).abs() < 1e-4 * (1.0 + h[(j, i)].abs()), "hess {j}{i}: {fdh} vs {}", h[(j, i)]);
            }
        }
    }

    fn fixture(seed: u64) -> (MarxBeliefs, Buffers) {
        let d = ModelDims::new(2, 2, 2, 2);
        let mut rng = oracle::rng(seed);
        let b = MarxBeliefs::new(d, oracle::random_mnw(&mut rng, d.dx(), d.dy, 15.0)).unwrap();
        let buf = Buffers::from_history(
            d,
            (0..2).map(|_| oracle::standard_normal_vec(&mut rng, 2)).collect(),
            (0..2).map(|_| oracle::standard_normal_vec(&mut rng, 2)).collect(),
        )
        .unwrap();
        (b, buf)
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let (b, buf) = fixture(21);
        let y = DVector::from_vec(vec![0.3, -0.4]);
        let bwd = backward_message(&b, &DVector::from_vec(vec![1.0, 0.5]), &DVector::from_vec(vec![0.2, 0.1]), &buf, 0)
            .unwrap();
        fd_check(&bwd, &y);
        let fwd = crate::filter::posterior_predictive(&b, &DVector::from_vec(vec![0.1, 0.2]), &buf).unwrap();
        fd_check(&fwd, &y);
    }

    #[test]
    fn backward_form_matches_direct_assembly() {
        let (b, buf) = fixture(3);
        let m = DVector::from_vec(vec![-0.2, 0.7]);
        let bwd = backward_message(&b, &m, &DVector::from_vec(vec![0.5, -0.5]), &buf, 0).unwrap();
        for k in 0..10 {
            let y = DVector::from_vec(vec![0.2 * k as f64 - 1.0, 0.1 * k as f64]);
            let direct = bwd.predictive_given(&y).unwrap().log_pdf(&m);
            assert!((direct - bwd.log_density(&y)).abs() < 1e-10);
        }
        assert_eq!(bwd.dof(), b.predictive_dof());
    }

    #[test]
    fn zero_coefficients_depend_on_y_only_through_spread() {
        let (mut b, buf) = fixture(4);
        b.posterior.mean.fill(0.0);
        let m = DVector::from_vec(vec![0.4, 0.1]);
        let bwd = backward_message(&b, &m, &DVector::from_vec(vec![0.5, -0.5]), &buf, 0).unwrap();
        let y = DVector::from_vec(vec![0.7, -0.3]);
        assert!(bwd.predictive_given(&y).unwrap().loc.iter().all(|v| *v == 0.0));
        let x = bwd.regressor(&y);
        let spread = 1.0 + b.posterior.row_precision.quad_form(&x);
        let t = LocationScaleT::new(bwd.dof(), DVector::zeros(2), b.posterior.scale.scaled(spread / bwd.dof())).unwrap();
        assert!((t.log_pdf(&m) - bwd.log_density(&y)).abs() < 1e-12);
    }

    #[test]
    fn hole_out_of_range_is_rejected() {
        let (b, buf) = fixture(5);
        let r = backward_message(&b, &DVector::zeros(2), &DVector::zeros(2), &buf, 2);
        assert!(matches!(r, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn flat_backward_gives_t_mode_and_curvature() {
        let scale = Spd::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3])).unwrap();
        let fwd = LocationScaleT::new(9.0, DVector::from_vec(vec![0.3, -0.2]), scale.clone()).unwrap();
        let (goal, status) = laplace_goal(&fwd, &Flat(2)).unwrap();
        assert_eq!(status, LaplaceStatus::Converged);
        assert!((&goal.mean - &fwd.loc).amax() < 1e-12);
        // curvature of ln T at its mode is (η+D)/η Σ⁻¹
        let expected = scale.matrix() * (9.0 / 11.0);
        assert!((goal.cov.matrix() - expected).amax() < 1e-12);
    }

    #[test]
    fn symmetric_product_peaks_at_the_shared_center() {
        let c = DVector::from_vec(vec![0.5, 0.5]);
        let fwd = LocationScaleT::new(6.0, c.clone(), Spd::identity(2)).unwrap();
        let other = LocationScaleT::new(4.0, c.clone(), Spd::scaled_identity(2, 0.2)).unwrap();
        let (goal, _) = laplace_goal(&fwd, &other).unwrap();
        assert!((&goal.mean - &c).amax() < 1e-12);
    }
}
