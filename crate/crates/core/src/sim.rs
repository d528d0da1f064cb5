//! Linear-Gaussian double-integrator robot in the plane.
//!
//! State `z = [x, y, ẋ, ẏ]`, control = acceleration, observation = noisy
//! position:
//!
//! ```text
//! z_k = F z_{k−1} + B u_k + w_k,   w_k ~ N(0, Q)
//! y_k = C z_k + v_k,               v_k ~ N(0, R)
//! ```

use nalgebra::{DMatrix, DVector, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::psd_factor;
use crate::planner::ControlBox;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    /// Time step in seconds.
    pub dt: f64,
    /// Process-noise intensity per axis (`ς`).
    pub process_noise: [f64; 2],
    /// Measurement-noise variance per axis (`ρ`).
    pub measurement_noise: [f64; 2],
    pub z0: [f64; 4],
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            process_noise: [1e-6, 1e-6],
            measurement_noise: [1e-3, 1e-3],
            z0: [0.0; 4],
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "dt",
                reason: format!("must be positive and finite, got {}", self.dt),
            });
        }
        let noise = self.process_noise.iter().chain(&self.measurement_noise);
        if noise.clone().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter {
                name: "noise",
                reason: "process and measurement noise must be non-negative".into(),
            });
        }
        if self.z0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "z0",
                reason: "initial state must be finite".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantMatrices {
    pub f: Matrix4<f64>,
    pub b: Matrix4x2<f64>,
    pub c: Matrix2x4<f64>,
    pub q: Matrix4<f64>,
    pub r: nalgebra::Matrix2<f64>,
}

pub fn build_matrices(cfg: &PlantConfig) -> PlantMatrices {
    let dt = cfg.dt;
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    let mut b = Matrix4x2::zeros();
    b[(2, 0)] = dt;
    b[(3, 1)] = dt;
    let mut c = Matrix2x4::zeros();
    c[(0, 0)] = 1.0;
    c[(1, 1)] = 1.0;
    let mut q = Matrix4::zeros();
    for (axis, s) in cfg.process_noise.iter().enumerate() {
        let (p, v) = (axis, axis + 2);
        q[(p, p)] = dt.powi(3) / 3.0 * s;
        q[(p, v)] = dt.powi(2) / 2.0 * s;
        q[(v, p)] = dt.powi(2) / 2.0 * s;
        q[(v, v)] = dt * s;
    }
    let r = nalgebra::Matrix2::from_diagonal(&Vector2::from(cfg.measurement_noise));
    PlantMatrices { f, b, c, q, r }
}

#[derive(Debug, Clone)]
pub struct PlantState {
    pub z: Vector4<f64>,
    rng: ChaCha8Rng,
}

impl PlantState {
    pub fn new(z: Vector4<f64>, seed: u64) -> Self {
        Self {
            z,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// A plant together with its state and noise generator.
#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    mats: PlantMatrices,
    q_factor: Matrix4<f64>,
    r_factor: nalgebra::Matrix2<f64>,
    bounds: Option<ControlBox>,
    state: PlantState,
}

impl Plant {
    pub fn new(cfg: PlantConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mats = build_matrices(&cfg);
        let q_factor = Matrix4::from_column_slice(psd_factor(&DMatrix::from_column_slice(4, 4, mats.q.as_slice())).as_slice());
        let r_factor = nalgebra::Matrix2::from_column_slice(psd_factor(&DMatrix::from_column_slice(2, 2, mats.r.as_slice())).as_slice());
        let state = PlantState::new(Vector4::from(cfg.z0), seed);
        Ok(Self {
            cfg,
            mats,
            q_factor,
            r_factor,
            bounds: None,
            state,
        })
    }

    /// Makes [`Plant::step`] panic on controls outside `bounds`.
    pub fn with_control_bounds(mut self, bounds: ControlBox) -> Self {
        assert_eq!(bounds.dim(), 2, "plant controls are two-dimensional");
        self.bounds = Some(bounds);
        self
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn matrices(&self) -> &PlantMatrices {
        &self.mats
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    /// Draws process noise `w ~ N(0, Q)`.
    pub fn sample_process_noise(&mut self) -> Vector4<f64> {
        let e = Vector4::from_fn(|_, _| StandardNormal.sample(&mut self.state.rng));
        self.q_factor * e
    }

    fn sample_measurement_noise(&mut self) -> Vector2<f64> {
        let e = Vector2::from_fn(|_, _| StandardNormal.sample(&mut self.state.rng));
        self.r_factor * e
    }

    /// Advances one step and returns the observation.
    pub fn step(&mut self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != 2 {
            return Err(Error::DimensionMismatch {
                context: "plant control",
                expected: 2,
                actual: u.len(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "control",
                reason: format!("non-finite control {u:?}"),
            });
        }
        if let Some(bx) = &self.bounds {
            assert!(bx.contains(u), "control {u:?} outside the declared box");
        }
        let u = Vector2::new(u[0], u[1]);
        let w = self.sample_process_noise();
        let z = self.mats.f * self.state.z + self.mats.b * u + w;
        let v = self.sample_measurement_noise();
        let y = self.mats.c * z + v;
        self.state.z = z;
        Ok(DVector::from_column_slice(y.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> PlantConfig {
        PlantConfig {
            process_noise: [0.0; 2],
            measurement_noise: [0.0; 2],
            ..PlantConfig::default()
        }
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn matrices_at_default_step() {
        let m = build_matrices(&PlantConfig::default());
        assert_eq!(m.f[(0, 2)], 0.1);
        assert_eq!(m.f[(1, 3)], 0.1);
        assert_eq!(m.b[(2, 0)], 0.1);
        assert_eq!(m.b[(0, 0)], 0.0);
        assert!((m.q[(0, 0)] - 0.001 / 3.0 * 1e-6).abs() < 1e-24);
        assert!((m.q[(0, 2)] - 0.005e-6).abs() < 1e-22);
        assert_eq!(m.r[(1, 1)], 1e-3);
        assert_eq!(m.c * Vector4::new(1.0, 2.0, 3.0, 4.0), Vector2::new(1.0, 2.0));
    }

    #[test]
    fn q_is_zero_without_process_noise_and_psd_otherwise() {
        assert_eq!(build_matrices(&quiet()).q, Matrix4::zeros());
        for s in [[1e-6, 1e-6], [1.0, 0.0], [3.0, 0.5]] {
            let q = build_matrices(&PlantConfig {
                process_noise: s,
                ..PlantConfig::default()
            })
            .q;
            assert_eq!(q, q.transpose());
            let scale = q.amax();
            assert!(q.symmetric_eigenvalues().iter().all(|e| *e >= -1e-12 * scale));
        }
    }

    #[test]
    fn noiseless_rest_stays_put() {
        let mut p = Plant::new(quiet(), 1).unwrap();
        let y = p.step(&v(&[0.0, 0.0])).unwrap();
        assert_eq!(y, v(&[0.0, 0.0]));
        assert_eq!(p.state().z, Vector4::zeros());
    }

    #[test]
    fn two_steps_of_constant_push() {
        let mut p = Plant::new(quiet(), 1).unwrap();
        p.step(&v(&[1.0, 0.0])).unwrap();
        let y = p.step(&v(&[1.0, 0.0])).unwrap();
        assert!((y[0] - 0.01).abs() < 1e-15);
        assert!((p.state().z[2] - 0.2).abs() < 1e-15);
        assert_eq!(y[1], 0.0);
    }

    #[test]
    fn matches_closed_form_double_integrator() {
        let cfg = PlantConfig {
            z0: [0.5, -0.2, 0.1, 0.3],
            ..quiet()
        };
        let m = build_matrices(&cfg);
        let u = Vector2::new(0.4, -0.7);
        let mut p = Plant::new(cfg.clone(), 0).unwrap();
        let mut fk = Matrix4::identity();
        let mut drive = Vector4::zeros();
        for _ in 0..50 {
            p.step(&v(&[u[0], u[1]])).unwrap();
            drive += fk * m.b * u;
            fk *= m.f;
        }
        let closed = fk * Vector4::from(cfg.z0) + drive;
        assert!((p.state().z - closed).amax() < 1e-12);
    }

    #[test]
    fn process_noise_has_covariance_q() {
        let cfg = PlantConfig {
            process_noise: [2.0, 0.5],
            ..PlantConfig::default()
        };
        let mut p = Plant::new(cfg, 42).unwrap();
        let n = 100_000;
        let mut acc = Matrix4::<f64>::zeros();
        for _ in 0..n {
            let w = p.sample_process_noise();
            acc += w * w.transpose();
        }
        let emp = acc / n as f64;
        let q = p.matrices().q;
        assert!((emp - q).norm() / q.norm() < 0.05);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = |seed| {
            let mut p = Plant::new(PlantConfig::default(), seed).unwrap();
            (0..100).map(|k| p.step(&v(&[(k as f64).sin(), 0.5])).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn rejects_non_finite_controls_and_bad_config() {
        let mut p = Plant::new(PlantConfig::default(), 0).unwrap();
        assert!(p.step(&v(&[f64::NAN, 0.0])).is_err());
        assert!(p.step(&v(&[0.0])).is_err());
        assert!(Plant::new(PlantConfig { dt: 0.0, ..PlantConfig::default() }, 0).is_err());
        assert!(Plant::new(PlantConfig { process_noise: [-1.0, 0.0], ..PlantConfig::default() }, 0).is_err());
    }

    #[test]
    #[should_panic(expected = "outside the declared box")]
    fn bounded_plant_asserts() {
        let mut p = Plant::new(PlantConfig::default(), 0)
            .unwrap()
            .with_control_bounds(ControlBox::symmetric(2, 1.0).unwrap());
        let _ = p.step(&v(&[1.5, 0.0]));
    }
}
