//! Expected-free-energy control selection and the multi-step planning pass.
//!
//! For a single step the agent minimizes `½uᵀΥu + G(u)` over the control box,
//! where
//!
//! ```text
//! G(u) = −½ ln|Σ(u)| + ½ Tr[S⁻¹ (Σ(u) η/(η−2) + (μ(u)−m)(μ(u)−m)ᵀ)]
//! ```
//!
//! and `T_η(μ(u), Σ(u))` is the posterior predictive. Additive terms that do
//! not depend on `u` are dropped, so logged `G` values are only comparable
//! within one set of beliefs and one goal.
//!
//! Longer horizons chain 1-step problems. A forward pass selects controls
//! and propagates predicted means through virtual buffers; a backward pass
//! scores each predicted output by how well it explains the next step's
//! goal mean and turns forward × backward into a Gaussian intermediate goal
//! by Laplace approximation.

mod laplace;

pub use laplace::{backward_message, laplace_goal, BackwardMessage, Flat, LaplaceStatus, LogFactor};

use nalgebra::{DMatrix, DVector};

use crate::distributions::{Gaussian, LocationScaleT};
use crate::error::{check_dim, Error, Result};
use crate::filter::{make_regressor, posterior_predictive, Buffers, MarxBeliefs};
use crate::linalg::Spd;
use crate::optimize::{default_starts, minimize_box, OptimizerConfig};

/// Gaussian target over a future output.
pub type GoalPrior = Gaussian;

/// Zero-mean Gaussian prior over controls, given by its precision `Υ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPrior {
    pub precision: Spd,
}

impl ControlPrior {
    pub fn new(precision: Spd) -> Self {
        Self { precision }
    }

    pub fn isotropic(du: usize, precision: f64) -> Self {
        Self::new(Spd::scaled_identity(du, precision))
    }

    /// `½ uᵀ Υ u`.
    pub fn energy(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(self.precision.matrix() * u))
    }
}

/// Per-coordinate control bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBox {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl ControlBox {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        check_dim("control box", lo.len(), hi.len())?;
        if lo.iter().zip(hi.iter()).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "control box",
                reason: "lower bounds must be strictly below upper bounds".into(),
            });
        }
        Ok(Self { lo, hi })
    }

    /// `[−bound, bound]^n`.
    pub fn symmetric(n: usize, bound: f64) -> Result<Self> {
        Self::new(DVector::from_element(n, -bound), DVector::from_element(n, bound))
    }

    pub fn lo(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.len() == self.dim() && u.iter().enumerate().all(|(i, v)| *v >= self.lo[i] && *v <= self.hi[i])
    }

    /// `n` stacked copies of the box, for optimizing a control sequence.
    pub fn repeated(&self, n: usize) -> (DVector<f64>, DVector<f64>) {
        let d = self.dim();
        (
            DVector::from_fn(n * d, |i, _| self.lo[i % d]),
            DVector::from_fn(n * d, |i, _| self.hi[i % d]),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub horizon: usize,
    /// Backward/forward refinements after the first forward pass.
    pub sweeps: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 3,
            sweeps: 1,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Result of a 1-step control selection.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub control: DVector<f64>,
    /// `½uᵀΥu + G(u)` at the returned control.
    pub objective: f64,
    /// `G(u)` at the returned control.
    pub efe: f64,
    pub converged: bool,
}

/// `G(u)` computed through the posterior predictive.
pub fn efe(b: &MarxBeliefs, buf: &Buffers, u: &DVector<f64>, goal: &GoalPrior) -> Result<f64> {
    let pred = posterior_predictive(b, u, buf)?;
    efe_of_predictive(&pred, goal)
}

fn efe_of_predictive(pred: &LocationScaleT, goal: &GoalPrior) -> Result<f64> {
    check_dim("goal", pred.dim(), goal.dim())?;
    let cov = pred.covariance()?;
    let resid = &pred.loc - &goal.mean;
    Ok(-0.5 * pred.scale.log_det() + 0.5 * (goal.cov.trace_solve(&cov) + goal.cov.quad_form(&resid)))
}

/// Negative predictive entropy plus cross-entropy to the goal.
pub fn standard_fe(b: &MarxBeliefs, buf: &Buffers, u: &DVector<f64>, goal: &GoalPrior) -> Result<f64> {
    let pred = posterior_predictive(b, u, buf)?;
    Ok(-pred.entropy() + pred.cross_entropy_to(goal)?)
}

/// `G(u)` specialised to fixed beliefs, buffers and goal.
///
/// With `x = [u; x_rest]`, `μ(u) = M_uᵀu + Mᵀx_rest` and
/// `1 + xᵀΛ⁻¹x = 1 + ‖L⁻¹E_u u + L⁻¹x_rest‖²`, so each evaluation is a few
/// small matrix-vector products.
#[derive(Debug, Clone)]
pub struct EfeObjective {
    dy: f64,
    dof: f64,
    moment_factor: f64,
    log_det_omega: f64,
    trace_goal_omega: f64,
    control_coeffs_t: DMatrix<f64>,
    base_loc: DVector<f64>,
    white_u: DMatrix<f64>,
    white_rest: DVector<f64>,
    goal_mean: DVector<f64>,
    goal_cov: Spd,
}

impl EfeObjective {
    pub fn new(b: &MarxBeliefs, buf: &Buffers, goal: &GoalPrior) -> Result<Self> {
        let dims = b.dims();
        check_dim("goal", dims.dy, goal.dim())?;
        let dof = b.predictive_dof();
        if !(dof > 2.0) {
            return Err(Error::MomentUndefined { dof });
        }
        let post = &b.posterior;
        let rest = make_regressor(&DVector::zeros(dims.du), buf)?.into_vector();
        let mut select_u = DMatrix::zeros(dims.dx(), dims.du);
        for i in 0..dims.du {
            select_u[(i, i)] = 1.0;
        }
        Ok(Self {
            dy: dims.dy as f64,
            dof,
            moment_factor: dof / (dof - 2.0),
            log_det_omega: post.scale.log_det(),
            trace_goal_omega: goal.cov.trace_solve(post.scale.matrix()),
            control_coeffs_t: post.mean.rows(0, dims.du).transpose(),
            base_loc: post.mean.transpose() * &rest,
            white_u: post.row_precision.whiten_mat(&select_u),
            white_rest: post.row_precision.whiten(&rest),
            goal_mean: goal.mean.clone(),
            goal_cov: goal.cov.clone(),
        })
    }

    pub fn predictive_mean(&self, u: &DVector<f64>) -> DVector<f64> {
        &self.base_loc + &self.control_coeffs_t * u
    }

    /// `1 + xᵀΛ⁻¹x`.
    pub fn spread(&self, u: &DVector<f64>) -> f64 {
        1.0 + (&self.white_rest + &self.white_u * u).norm_squared()
    }

    pub fn eval(&self, u: &DVector<f64>) -> f64 {
        let c = self.spread(u) / self.dof;
        let resid = self.predictive_mean(u) - &self.goal_mean;
        -0.5 * (self.dy * c.ln() + self.log_det_omega)
            + 0.5 * (c * self.moment_factor * self.trace_goal_omega + self.goal_cov.quad_form(&resid))
    }
}

/// Minimizes `½uᵀΥu + G(u)` over the box.
pub fn select_control(
    b: &MarxBeliefs,
    buf: &Buffers,
    goal: &GoalPrior,
    cp: &ControlPrior,
    bounds: &ControlBox,
    cfg: &OptimizerConfig,
) -> Result<Selection> {
    check_dim("control box", b.dims().du, bounds.dim())?;
    check_dim("control prior", b.dims().du, cp.precision.dim())?;
    let obj = EfeObjective::new(b, buf, goal)?;
    let starts = default_starts(bounds.lo(), bounds.hi(), None, cfg.random_starts, cfg.seed);
    let best = minimize_box(
        |u| cp.energy(u) + obj.eval(u),
        bounds.lo(),
        bounds.hi(),
        &starts,
        cfg,
    );
    if !best.converged {
        log::warn!("control selection stopped on its evaluation budget");
    }
    let efe = obj.eval(&best.x);
    Ok(Selection {
        control: best.x,
        objective: best.value,
        efe,
        converged: best.converged,
    })
}

/// The forward message: the posterior predictive given the selected control.
pub fn forward_message(b: &MarxBeliefs, buf: &Buffers, u: &DVector<f64>) -> Result<LocationScaleT> {
    posterior_predictive(b, u, buf)
}

/// An H-step plan. Only `controls[0]` is meant to be executed.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub controls: Vec<DVector<f64>>,
    pub intermediate_goals: Vec<GoalPrior>,
    pub predicted: Vec<LocationScaleT>,
    pub efe_values: Vec<f64>,
    /// False if any control selection hit its evaluation budget.
    pub converged: bool,
    /// Number of Laplace steps that fell back to forward moments.
    pub laplace_fallbacks: usize,
}

struct ForwardPass {
    controls: Vec<DVector<f64>>,
    predicted: Vec<LocationScaleT>,
    efe_values: Vec<f64>,
    /// Buffers at each horizon step, `buffers[i]` current when choosing
    /// `controls[i]`; one extra entry for the step after the horizon.
    buffers: Vec<Buffers>,
    converged: bool,
}

fn forward_pass(
    b: &MarxBeliefs,
    buf: &Buffers,
    goals: &[GoalPrior],
    cp: &ControlPrior,
    bounds: &ControlBox,
    cfg: &OptimizerConfig,
) -> Result<ForwardPass> {
    let mut pass = ForwardPass {
        controls: Vec::with_capacity(goals.len()),
        predicted: Vec::with_capacity(goals.len()),
        efe_values: Vec::with_capacity(goals.len()),
        buffers: vec![buf.clone()],
        converged: true,
    };
    for goal in goals {
        let current = pass.buffers.last().expect("seeded with the initial buffers");
        let sel = select_control(b, current, goal, cp, bounds, cfg)?;
        let pred = forward_message(b, current, &sel.control)?;
        let mut next = current.clone();
        next.push(&sel.control, &pred.loc)?;
        pass.converged &= sel.converged;
        pass.efe_values.push(sel.efe);
        pass.controls.push(sel.control);
        pass.predicted.push(pred);
        pass.buffers.push(next);
    }
    Ok(pass)
}

/// Plans `cfg.horizon` steps toward `final_goal`.
pub fn plan(
    b: &MarxBeliefs,
    buf: &Buffers,
    final_goal: &GoalPrior,
    cp: &ControlPrior,
    bounds: &ControlBox,
    cfg: &PlannerConfig,
) -> Result<Plan> {
    if cfg.horizon == 0 {
        return Err(Error::InvalidParameter {
            name: "horizon",
            reason: "must be at least 1".into(),
        });
    }
    let h = cfg.horizon;
    let mut goals = vec![final_goal.clone(); h];
    let mut pass = forward_pass(b, buf, &goals, cp, bounds, &cfg.optimizer)?;
    let mut fallbacks = 0;
    for _ in 0..cfg.sweeps {
        if h < 2 {
            break;
        }
        for t in (0..h - 1).rev() {
            let fwd = &pass.predicted[t];
            let (goal, status) = if b.dims().mem_y == 0 {
                laplace_goal(fwd, &Flat(b.dims().dy))?
            } else {
                let bwd = backward_message(b, &goals[t + 1].mean, &pass.controls[t + 1], &pass.buffers[t + 1], 0)?;
                laplace_goal(fwd, &bwd)?
            };
            if status == LaplaceStatus::MomentFallback {
                fallbacks += 1;
            }
            goals[t] = goal;
        }
        pass = forward_pass(b, buf, &goals, cp, bounds, &cfg.optimizer)?;
    }
    assert!(
        pass.controls.iter().all(|u| bounds.contains(u)),
        "planned controls must stay inside the control box"
    );
    Ok(Plan {
        controls: pass.controls,
        intermediate_goals: goals,
        predicted: pass.predicted,
        efe_values: pass.efe_values,
        converged: pass.converged,
        laplace_fallbacks: fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::oracle;
    use crate::filter::ModelDims;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn fixture(seed: u64, dy: usize) -> (MarxBeliefs, Buffers) {
        let d = ModelDims::new(2, dy, 2, 2);
        let mut rng = oracle::rng(seed);
        let b = MarxBeliefs::new(d, oracle::random_mnw(&mut rng, d.dx(), d.dy, 20.0)).unwrap();
        let buf = Buffers::from_history(
            d,
            (0..2).map(|_| oracle::standard_normal_vec(&mut rng, 2) * 0.5).collect(),
            (0..2).map(|_| oracle::standard_normal_vec(&mut rng, dy) * 0.5).collect(),
        )
        .unwrap();
        (b, buf)
    }

    fn goal(m: &[f64], s: f64) -> GoalPrior {
        Gaussian::new(v(m), Spd::scaled_identity(m.len(), s)).unwrap()
    }

    #[test]
    fn fast_objective_matches_predictive_route() {
        let (b, buf) = fixture(1, 2);
        let g = goal(&[0.0, 1.0], 0.3);
        let obj = EfeObjective::new(&b, &buf, &g).unwrap();
        for k in 0..10 {
            let u = v(&[0.2 * k as f64 - 1.0, 0.5 - 0.1 * k as f64]);
            let slow = efe(&b, &buf, &u, &g).unwrap();
            assert!((slow - obj.eval(&u)).abs() < 1e-10 * (1.0 + slow.abs()));
        }
    }

    #[test]
    fn xi_term_vanishes_at_predicted_mean() {
        let (b, buf) = fixture(2, 2);
        let u = v(&[0.1, -0.3]);
        let pred = posterior_predictive(&b, &u, &buf).unwrap();
        let s = Spd::new(DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.2])).unwrap();
        let g = Gaussian::new(pred.loc.clone(), s.clone()).unwrap();
        let eta = pred.dof;
        let expected = -0.5 * pred.scale.log_det() + 0.5 * s.trace_solve(pred.scale.matrix()) * eta / (eta - 2.0);
        assert!((efe(&b, &buf, &u, &g).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn goal_mean_only_moves_the_xi_term() {
        let (b, buf) = fixture(3, 2);
        let u = v(&[0.4, 0.2]);
        let s = Spd::new(DMatrix::from_row_slice(2, 2, &[0.5, 0.2, 0.2, 0.3])).unwrap();
        let g1 = Gaussian::new(v(&[1.0, 0.0]), s.clone()).unwrap();
        let g2 = Gaussian::new(v(&[-0.5, 2.0]), s.clone()).unwrap();
        let mu = posterior_predictive(&b, &u, &buf).unwrap().loc;
        let xi = |m: &DVector<f64>| {
            let r = &mu - m;
            &r * r.transpose()
        };
        let expected = 0.5 * s.trace_solve(&(xi(&g1.mean) - xi(&g2.mean)));
        let got = efe(&b, &buf, &u, &g1).unwrap() - efe(&b, &buf, &u, &g2).unwrap();
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn efe_needs_finite_variance() {
        let (mut b, buf) = fixture(4, 2);
        b.posterior.dof = 3.0; // η = 2
        let r = efe(&b, &buf, &v(&[0.0, 0.0]), &goal(&[0.0, 0.0], 1.0));
        assert!(matches!(r, Err(Error::MomentUndefined { .. })));
        let r = EfeObjective::new(&b, &buf, &goal(&[0.0, 0.0], 1.0));
        assert!(matches!(r, Err(Error::MomentUndefined { .. })));
    }

    #[test]
    fn information_term_rewards_spread_at_fixed_trace() {
        // two predictives with identical mean and Tr[S⁻¹Σ] but different |Σ|
        let g = goal(&[0.0, 0.0], 1.0);
        let mk = |a: f64, c: f64| {
            LocationScaleT::new(10.0, v(&[0.3, 0.3]), Spd::new(DMatrix::from_row_slice(2, 2, &[a, 0.0, 0.0, c])).unwrap())
                .unwrap()
        };
        let peaked = mk(1.9, 0.1);
        let round = mk(1.0, 1.0);
        assert!(round.scale.log_det() > peaked.scale.log_det());
        assert!(efe_of_predictive(&round, &g).unwrap() < efe_of_predictive(&peaked, &g).unwrap());
    }

    #[test]
    fn standard_fe_differs_by_a_constant() {
        let (b, buf) = fixture(5, 2);
        let g = goal(&[0.5, -0.5], 0.2);
        let mut rng = oracle::rng(9);
        let base = {
            let u = v(&[0.0, 0.0]);
            standard_fe(&b, &buf, &u, &g).unwrap() - efe(&b, &buf, &u, &g).unwrap()
        };
        for _ in 0..20 {
            let u = oracle::standard_normal_vec(&mut rng, 2);
            let diff = standard_fe(&b, &buf, &u, &g).unwrap() - efe(&b, &buf, &u, &g).unwrap();
            assert!((diff - base).abs() < 1e-8);
        }
    }

    #[test]
    fn shifting_coefficients_moves_only_cross_entropy() {
        let (b, buf) = fixture(6, 2);
        let g = goal(&[0.5, -0.5], 0.2);
        let u = v(&[0.3, 0.6]);
        let mut shifted = b.clone();
        for i in 0..shifted.posterior.mean.nrows() {
            shifted.posterior.mean[(i, 0)] += 0.25;
        }
        let p0 = posterior_predictive(&b, &u, &buf).unwrap();
        let p1 = posterior_predictive(&shifted, &u, &buf).unwrap();
        assert!((p0.entropy() - p1.entropy()).abs() < 1e-14);
        assert!((p0.cross_entropy_to(&g).unwrap() - p1.cross_entropy_to(&g).unwrap()).abs() > 1e-6);
    }

    #[test]
    fn huge_control_precision_pins_control_to_zero() {
        let (b, buf) = fixture(7, 2);
        let cp = ControlPrior::isotropic(2, 1e12);
        let sel = select_control(&b, &buf, &goal(&[3.0, -3.0], 0.1), &cp, &ControlBox::symmetric(2, 1.0).unwrap(), &OptimizerConfig::default())
            .unwrap();
        assert!(sel.control.amax() < 1e-4);
    }

    #[test]
    fn selection_matches_fine_grid() {
        for seed in 10..13 {
            let (b, buf) = fixture(seed, 2);
            let g = goal(&[0.5, -0.2], 0.5);
            let cp = ControlPrior::isotropic(2, 0.1);
            let bx = ControlBox::symmetric(2, 1.0).unwrap();
            let sel = select_control(&b, &buf, &g, &cp, &bx, &OptimizerConfig::default()).unwrap();
            let j = |u: &DVector<f64>| cp.energy(u) + efe(&b, &buf, u, &g).unwrap();
            let (grid_u, grid_j) = oracle::grid_argmin_2d(j, [-1.0, -1.0], [1.0, 1.0], 201);
            assert!(sel.objective <= grid_j + 1e-3);
            assert!((&sel.control - &grid_u).amax() <= 0.01 + 1e-9, "{:?} vs {:?}", sel.control, grid_u);
        }
    }

    #[test]
    fn single_step_plan_is_select_control() {
        let (b, buf) = fixture(8, 2);
        let g = goal(&[0.2, 0.4], 0.3);
        let cp = ControlPrior::isotropic(2, 0.5);
        let bx = ControlBox::symmetric(2, 1.0).unwrap();
        let cfg = PlannerConfig {
            horizon: 1,
            ..PlannerConfig::default()
        };
        let p = plan(&b, &buf, &g, &cp, &bx, &cfg).unwrap();
        let sel = select_control(&b, &buf, &g, &cp, &bx, &cfg.optimizer).unwrap();
        assert_eq!(p.controls.len(), 1);
        assert_eq!(p.predicted.len(), 1);
        assert_eq!(p.controls[0], sel.control);
    }

    #[test]
    fn zero_sweeps_is_greedy_sequential_planning() {
        let (b, buf) = fixture(9, 2);
        let g = goal(&[0.2, 0.4], 0.3);
        let cp = ControlPrior::isotropic(2, 0.5);
        let bx = ControlBox::symmetric(2, 1.0).unwrap();
        let cfg = PlannerConfig {
            horizon: 3,
            sweeps: 0,
            ..PlannerConfig::default()
        };
        let p = plan(&b, &buf, &g, &cp, &bx, &cfg).unwrap();
        let mut vbuf = buf.clone();
        for t in 0..3 {
            let sel = select_control(&b, &vbuf, &g, &cp, &bx, &cfg.optimizer).unwrap();
            let pred = forward_message(&b, &vbuf, &sel.control).unwrap();
            assert_eq!(p.controls[t], sel.control);
            assert_eq!(p.intermediate_goals[t], g);
            vbuf.push(&sel.control, &pred.loc).unwrap();
        }
    }

    #[test]
    fn forward_chain_with_zero_coefficients_predicts_zero() {
        let (mut b, _) = fixture(11, 2);
        b.posterior.mean.fill(0.0);
        let buf = Buffers::zeros(b.dims());
        let cfg = PlannerConfig::default();
        let p = plan(&b, &buf, &goal(&[0.0, 1.0], 0.3), &ControlPrior::isotropic(2, 1e-6), &ControlBox::symmetric(2, 1.0).unwrap(), &cfg)
            .unwrap();
        assert_eq!(p.controls.len(), 3);
        assert!(p.predicted.iter().all(|t| t.loc.iter().all(|v| *v == 0.0)));
        assert_eq!(p.intermediate_goals.len(), 3);
        assert_eq!(p.intermediate_goals[2].mean, v(&[0.0, 1.0]));
    }

    #[test]
    fn rejects_zero_horizon() {
        let (b, buf) = fixture(12, 2);
        let cfg = PlannerConfig {
            horizon: 0,
            ..PlannerConfig::default()
        };
        let r = plan(&b, &buf, &goal(&[0.0, 0.0], 1.0), &ControlPrior::isotropic(2, 1.0), &ControlBox::symmetric(2, 1.0).unwrap(), &cfg);
        assert!(r.is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn plan_controls_stay_in_box(seed in 0u64..1000, bound in 0.1..2.0f64) {
            let (b, buf) = fixture(seed, 2);
            let bx = ControlBox::symmetric(2, bound).unwrap();
            let p = plan(&b, &buf, &goal(&[5.0, -5.0], 0.01), &ControlPrior::isotropic(2, 1e-6), &bx, &PlannerConfig::default()).unwrap();
            prop_assert!(p.controls.iter().all(|u| bx.contains(u)));
        }
    }
}
