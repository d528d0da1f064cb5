//! Independent reference computations: quadrature, Monte-Carlo sampling of
//! the matrix-normal-Wishart, exhaustive grids and finite differences.
//!
//! Nothing here calls the filter or planner code paths; the helpers work
//! from raw parameters so they can be used to check those paths.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::distributions::{LocationScaleT, MatrixNormalWishart};
use crate::linalg::Spd;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
}

impl McEstimate {
    pub fn from_samples(xs: impl IntoIterator<Item = f64>) -> Self {
        // Welford
        let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
        for x in xs {
            n += 1;
            let d = x - mean;
            mean += d / n as f64;
            m2 += d * (x - mean);
        }
        let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        Self {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }

    /// Whether `value` lies within `k` standard errors of the estimate.
    pub fn agrees(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.se
    }
}

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// `∫_ℝ f(y) dy` via the substitution `y = t/(1−t²)`; `f` must decay faster
/// than `1/y²`.
pub fn integrate_real_line(f: impl Fn(f64) -> f64, tol: f64) -> f64 {
    let g = |t: f64| {
        let d = 1.0 - t * t;
        if d <= 0.0 {
            return 0.0;
        }
        let y = t / d;
        let v = f(y) * (1.0 + t * t) / (d * d);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    // split at 0 so the peak of a centred integrand is sampled
    adaptive_simpson(&g, -1.0, 0.0, 0.5 * tol) + adaptive_simpson(&g, 0.0, 1.0, 0.5 * tol)
}

pub fn standard_normal_vec(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Well-conditioned random SPD matrix `G Gᵀ/d + I/2`.
pub fn random_spd(rng: &mut impl Rng, d: usize) -> Spd {
    let g = random_matrix(rng, d, d);
    Spd::new(&g * g.transpose() / d as f64 + DMatrix::identity(d, d) * 0.5).unwrap()
}

/// Haar-ish random rotation from the QR factor of a Gaussian matrix.
pub fn random_rotation(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
    let g = random_matrix(rng, d, d);
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let signs = DMatrix::from_diagonal(&DVector::from_fn(d, |i, _| r[(i, i)].signum()));
    q * signs
}

pub fn random_mnw(rng: &mut impl Rng, dx: usize, dy: usize, dof: f64) -> MatrixNormalWishart {
    let mean = random_matrix(rng, dx, dy) * 0.3;
    let lambda = random_spd(rng, dx);
    let omega = random_spd(rng, dy);
    MatrixNormalWishart::new(mean, lambda, omega, dof).unwrap()
}

fn dense_cholesky(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone()
        .cholesky()
        .expect("oracle matrix must be positive definite")
        .unpack()
}

/// Draws `(A, W)` from an MNW using explicit dense inverses and the Bartlett
/// decomposition.
pub struct MnwSampler {
    mean: DMatrix<f64>,
    row_cov_chol: DMatrix<f64>,
    wishart_scale_chol: DMatrix<f64>,
    dof: f64,
}

impl MnwSampler {
    pub fn new(d: &MatrixNormalWishart) -> Self {
        let row_cov = d.row_precision.matrix().clone().try_inverse().unwrap();
        let wishart_scale = d.scale.matrix().clone().try_inverse().unwrap();
        Self {
            mean: d.mean.clone(),
            row_cov_chol: dense_cholesky(&crate::linalg::symmetrize(&row_cov)),
            wishart_scale_chol: dense_cholesky(&crate::linalg::symmetrize(&wishart_scale)),
            dof: d.dof,
        }
    }

    /// Returns `(A, W, W⁻¹)`.
    pub fn sample(&self, rng: &mut impl Rng) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let dy = self.mean.ncols();
        let dx = self.mean.nrows();
        let mut bart = DMatrix::<f64>::zeros(dy, dy);
        for i in 0..dy {
            let chi = ChiSquared::new(self.dof - i as f64).unwrap();
            bart[(i, i)] = chi.sample(rng).sqrt();
            for j in 0..i {
                bart[(i, j)] = rng.sample(StandardNormal);
            }
        }
        let lw = &self.wishart_scale_chol * bart;
        let w = &lw * lw.transpose();
        let w_inv = w.clone().try_inverse().unwrap();
        let col_chol = dense_cholesky(&crate::linalg::symmetrize(&w_inv));
        let z = random_matrix(rng, dx, dy);
        let a = &self.mean + &self.row_cov_chol * z * col_chol.transpose();
        (a, w, w_inv)
    }
}

/// Batch conjugate posterior `(Λ, M, Ω, ν)` from stacked data, using a
/// dense inverse and the sufficient statistics directly.
pub fn batch_posterior(
    prior: &MatrixNormalWishart,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, f64) {
    let l0 = prior.row_precision.matrix().clone();
    let mut lam = l0.clone();
    let mut xy = &l0 * &prior.mean;
    let mut yy = prior.scale.matrix() + prior.mean.transpose() * &l0 * &prior.mean;
    for (x, y) in xs.iter().zip(ys) {
        lam += x * x.transpose();
        xy += x * y.transpose();
        yy += y * y.transpose();
    }
    let inv = lam.clone().try_inverse().unwrap();
    let m = &inv * &xy;
    let omega = yy - m.transpose() * &lam * &m;
    (lam, m, omega, prior.dof + xs.len() as f64)
}

/// Draws from a location-scale T as a Gaussian scale mixture.
pub fn sample_t(rng: &mut impl Rng, t: &LocationScaleT) -> DVector<f64> {
    let g = ChiSquared::new(t.dof).unwrap().sample(rng);
    let z = standard_normal_vec(rng, t.dim());
    &t.loc + t.scale.lower() * z * (t.dof / g).sqrt()
}

/// Log-density of `N(y | mean, cov)` from a dense covariance.
pub fn gaussian_log_pdf_dense(y: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = y.len() as f64;
    let r = y - mean;
    let inv = cov.clone().try_inverse().unwrap();
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + r.dot(&(inv * &r)))
}

/// Exhaustive search over a regular `n × n` grid on `[lo, hi]²`.
/// Returns `(argmin, min value)`.
pub fn grid_argmin_2d(
    f: impl Fn(&DVector<f64>) -> f64,
    lo: [f64; 2],
    hi: [f64; 2],
    n: usize,
) -> (DVector<f64>, f64) {
    let mut best = (DVector::zeros(2), f64::INFINITY);
    let step = |k: usize, i: usize| lo[k] + (hi[k] - lo[k]) * i as f64 / (n - 1) as f64;
    let mut p = DVector::zeros(2);
    for i in 0..n {
        for j in 0..n {
            p[0] = step(0, i);
            p[1] = step(1, j);
            let v = f(&p);
            if v < best.1 {
                best = (p.clone(), v);
            }
        }
    }
    best
}

/// Exhaustive search over a 1-D grid.
pub fn grid_argmin_1d(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .map(|x| (x, f(x)))
        .fold((f64::NAN, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b })
}

/// Central finite-difference Hessian with per-coordinate step `h`.
pub fn fd_hessian(f: impl Fn(&DVector<f64>) -> f64, at: &DVector<f64>, h: &[f64]) -> DMatrix<f64> {
    let n = at.len();
    let mut hess = DMatrix::zeros(n, n);
    let eval = |di: usize, si: f64, dj: usize, sj: f64| {
        let mut p = at.clone();
        p[di] += si * h[di];
        p[dj] += sj * h[dj];
        f(&p)
    };
    let f0 = f(at);
    for i in 0..n {
        hess[(i, i)] = (eval(i, 1.0, i, 0.0) - 2.0 * f0 + eval(i, -1.0, i, 0.0)) / (h[i] * h[i]);
        for j in 0..i {
            let v = (eval(i, 1.0, j, 1.0) - eval(i, 1.0, j, -1.0) - eval(i, -1.0, j, 1.0)
                + eval(i, -1.0, j, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}
