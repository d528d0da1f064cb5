//! Multi-start projected quasi-Newton minimization over a box.
//!
//! Gradients are central finite differences. Each start runs BFGS on the
//! free coordinates (those not pinned at a bound by the gradient sign) with
//! a projected Armijo backtracking line search.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Uniform random starts added to the deterministic ones.
    pub random_starts: usize,
    /// Objective evaluations allowed per start.
    pub max_evals_per_start: usize,
    /// Relative finite-difference step.
    pub fd_step: f64,
    /// Projected-gradient tolerance, relative to `1 + |f|`.
    pub grad_tol: f64,
    /// Seed for the random starts.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            random_starts: 4,
            max_evals_per_start: 200,
            fd_step: 1e-5,
            grad_tol: 1e-10,
            seed: 0x5EED_CAFE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    /// False when the winning start ran out of budget before meeting a
    /// stopping test.
    pub converged: bool,
    pub evals: usize,
}

pub fn project(x: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Center, up to four corners, an optional warm start and `n_random`
/// uniform draws. In two dimensions the four corners are all of them; in
/// higher dimensions they are the all-low and all-high corners and the two
/// alternating ones.
pub fn default_starts(
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    warm: Option<&DVector<f64>>,
    n_random: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let n = lo.len();
    let mut starts = vec![(lo + hi) * 0.5];
    let corner = |pattern: &dyn Fn(usize) -> bool| {
        DVector::from_fn(n, |i, _| if pattern(i) { hi[i] } else { lo[i] })
    };
    if n == 2 {
        for mask in 0..4usize {
            starts.push(corner(&|i| mask >> i & 1 == 1));
        }
    } else {
        starts.push(corner(&|_| false));
        starts.push(corner(&|_| true));
        starts.push(corner(&|i| i % 2 == 0));
        starts.push(corner(&|i| i % 2 == 1));
    }
    if let Some(w) = warm {
        let mut w = w.clone();
        project(&mut w, lo, hi);
        starts.push(w);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n_random {
        starts.push(DVector::from_fn(n, |i, _| rng.random_range(lo[i]..=hi[i])));
    }
    starts
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F: FnMut(&DVector<f64>) -> f64> Counted<F> {
    fn eval(&mut self, x: &DVector<f64>) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    fn gradient(&mut self, x: &DVector<f64>, rel_step: f64) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        let mut p = x.clone();
        for i in 0..x.len() {
            let h = rel_step * x[i].abs().max(1.0);
            p[i] = x[i] + h;
            let fp = self.eval(&p);
            p[i] = x[i] - h;
            let fm = self.eval(&p);
            p[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }
}

fn minimize_from<F: FnMut(&DVector<f64>) -> f64>(
    obj: &mut Counted<F>,
    start: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    cfg: &OptimizerConfig,
) -> (DVector<f64>, f64, bool) {
    let n = start.len();
    let budget = obj.evals + cfg.max_evals_per_start;
    let mut x = start.clone();
    project(&mut x, lo, hi);
    let mut fx = obj.eval(&x);
    let mut g = obj.gradient(&x, cfg.fd_step);
    let mut inv_h = DMatrix::<f64>::identity(n, n);
    let mut first_update = true;
    let width = (hi - lo).amax().max(f64::MIN_POSITIVE);

    loop {
        if !fx.is_finite() {
            return (x, fx, false);
        }
        let bound_tol = 1e-12 * width;
        let active: Vec<bool> = (0..n)
            .map(|i| (x[i] <= lo[i] + bound_tol && g[i] > 0.0) || (x[i] >= hi[i] - bound_tol && g[i] < 0.0))
            .collect();
        let pg = DVector::from_fn(n, |i, _| if active[i] { 0.0 } else { g[i] });
        if pg.amax() <= cfg.grad_tol * (1.0 + fx.abs()) {
            return (x, fx, true);
        }
        if obj.evals + 2 * n + 1 > budget {
            return (x, fx, false);
        }

        let mut d = -(&inv_h * &pg);
        for i in 0..n {
            if active[i] {
                d[i] = 0.0;
            }
        }
        if d.dot(&pg) >= 0.0 {
            inv_h = DMatrix::identity(n, n);
            first_update = true;
            d = -pg.clone();
        }
        // keep the first trial step inside the box diameter
        let mut alpha = (width / d.amax().max(f64::MIN_POSITIVE)).min(1.0);

        let mut accepted = None;
        while obj.evals < budget {
            let mut trial = &x + &d * alpha;
            project(&mut trial, lo, hi);
            let step = &trial - &x;
            if step.amax() <= 1e-15 * width {
                break;
            }
            let ft = obj.eval(&trial);
            if ft <= fx + 1e-4 * g.dot(&step) {
                accepted = Some((trial, ft, step));
                break;
            }
            alpha *= 0.5;
        }
        let Some((x_new, f_new, s)) = accepted else {
            // no descent possible along the projected path
            let converged = pg.amax() <= 1e-6 * (1.0 + fx.abs());
            return (x, fx, converged || obj.evals < budget);
        };
        if obj.evals + 2 * n > budget {
            return (x_new, f_new, false);
        }
        let g_new = obj.gradient(&x_new, cfg.fd_step);
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() && sy > 0.0 {
            if first_update {
                inv_h = DMatrix::identity(n, n) * (sy / yv.norm_squared());
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &inv_h * &yv;
            let yhy = yv.dot(&hy);
            inv_h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let small_step = s.amax() <= 1e-12 * width;
        let small_change = (fx - f_new).abs() <= 1e-15 * (1.0 + fx.abs());
        x = x_new;
        fx = f_new;
        g = g_new;
        if small_step && small_change {
            return (x, fx, true);
        }
    }
}

/// Minimizes `f` over the box `[lo, hi]` from every start, returning the best
/// result.
pub fn minimize_box<F: FnMut(&DVector<f64>) -> f64>(
    f: F,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    starts: &[DVector<f64>],
    cfg: &OptimizerConfig,
) -> Minimum {
    assert!(!starts.is_empty(), "minimize_box needs at least one start");
    let mut obj = Counted { f, evals: 0 };
    let mut best: Option<(DVector<f64>, f64, bool)> = None;
    for s in starts {
        let r = minimize_from(&mut obj, s, lo, hi, cfg);
        if best.as_ref().map_or(true, |b| r.1 < b.1) {
            best = Some(r);
        }
    }
    let (x, value, converged) = best.expect("at least one start");
    Minimum {
        x,
        value,
        converged,
        evals: obj.evals,
    }
}
