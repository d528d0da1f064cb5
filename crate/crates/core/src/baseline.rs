//! Model-predictive control on the same MARX beliefs.
//!
//! The cost over a control sequence `u_1..u_H` is
//! `Σ_t u_tᵀΥu_t + ‖μ_t − m*‖²`, where `μ_t` are posterior predictive means
//! rolled forward by feeding each predicted mean back in as the next
//! pseudo-observation. Predictive spread never enters.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::filter::{make_regressor, Buffers, MarxBeliefs, ModelDims};
use crate::optimize::{default_starts, minimize_box, OptimizerConfig};
use crate::planner::{ControlBox, ControlPrior};

/// Optimized control sequence; `control` is its first entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcSelection {
    pub control: DVector<f64>,
    /// The whole minimizing sequence, `H·D_u` entries.
    pub sequence: DVector<f64>,
    pub cost: f64,
    pub converged: bool,
}

fn check_sequence(dims: ModelDims, u_seq: &[DVector<f64>]) -> Result<()> {
    if u_seq.is_empty() {
        return Err(Error::InvalidParameter {
            name: "horizon",
            reason: "must be at least 1".into(),
        });
    }
    for u in u_seq {
        check_dim("control", dims.du, u.len())?;
    }
    Ok(())
}

/// MPC cost of an explicit control sequence, rolled through the buffers.
pub fn mpc_cost(
    b: &MarxBeliefs,
    buf: &Buffers,
    u_seq: &[DVector<f64>],
    cp: &ControlPrior,
    goal_mean: &DVector<f64>,
) -> Result<f64> {
    let dims = b.dims();
    check_sequence(dims, u_seq)?;
    check_dim("goal mean", dims.dy, goal_mean.len())?;
    check_dim("control prior", dims.du, cp.precision.dim())?;
    let mut vbuf = buf.clone();
    let mut cost = 0.0;
    for u in u_seq {
        let x = make_regressor(u, &vbuf)?;
        let mu = b.posterior.mean.transpose() * x.as_vector();
        cost += u.dot(&(cp.precision.matrix() * u)) + (&mu - goal_mean).norm_squared();
        vbuf.push(u, &mu)?;
    }
    Ok(cost)
}

/// [`mpc_cost`] over a flat `H·D_u` vector, with the regressor shifted in
/// place instead of rebuilding buffers.
#[derive(Debug, Clone)]
pub struct MpcObjective {
    dims: ModelDims,
    horizon: usize,
    coeffs_t: DMatrix<f64>,
    start: DVector<f64>,
    upsilon: DMatrix<f64>,
    goal_mean: DVector<f64>,
}

impl MpcObjective {
    pub fn new(b: &MarxBeliefs, buf: &Buffers, cp: &ControlPrior, goal_mean: &DVector<f64>, horizon: usize) -> Result<Self> {
        let dims = b.dims();
        check_dim("goal mean", dims.dy, goal_mean.len())?;
        check_dim("control prior", dims.du, cp.precision.dim())?;
        if horizon == 0 {
            return Err(Error::InvalidParameter {
                name: "horizon",
                reason: "must be at least 1".into(),
            });
        }
        Ok(Self {
            dims,
            horizon,
            coeffs_t: b.posterior.mean.transpose(),
            start: make_regressor(&DVector::zeros(dims.du), buf)?.into_vector(),
            upsilon: cp.precision.matrix().clone(),
            goal_mean: goal_mean.clone(),
        })
    }

    pub fn eval(&self, seq: &DVector<f64>) -> f64 {
        let ModelDims { du, dy, mem_u, mem_y } = self.dims;
        let yo = self.dims.y_offset();
        let mut x = self.start.clone();
        let mut cost = 0.0;
        for t in 0..self.horizon {
            let u = seq.rows(t * du, du);
            x.rows_mut(0, du).copy_from(&u);
            let mu = &self.coeffs_t * &x;
            cost += u.dot(&(&self.upsilon * u)) + (&mu - &self.goal_mean).norm_squared();
            if t + 1 == self.horizon {
                break;
            }
            // newest entries sit first in each block
            if mem_u > 0 {
                x.as_mut_slice().copy_within(du..du * mem_u, 2 * du);
                let (head, tail) = x.as_mut_slice().split_at_mut(du);
                tail[..du].copy_from_slice(head);
            }
            if mem_y > 0 {
                x.as_mut_slice().copy_within(yo..yo + dy * (mem_y - 1), yo + dy);
                x.rows_mut(yo, dy).copy_from(&mu);
            }
        }
        cost
    }
}

/// Drops the first control of a sequence and repeats the last one.
pub fn shift_sequence(seq: &DVector<f64>, du: usize) -> DVector<f64> {
    let n = seq.len();
    DVector::from_fn(n, |i, _| if i + du < n { seq[i + du] } else { seq[i] })
}

/// Minimizes the MPC cost over `box^H`. `warm` is a full previous sequence,
/// typically passed through [`shift_sequence`].
#[allow(clippy::too_many_arguments)]
pub fn mpc_select(
    b: &MarxBeliefs,
    buf: &Buffers,
    cp: &ControlPrior,
    bounds: &ControlBox,
    goal_mean: &DVector<f64>,
    horizon: usize,
    cfg: &OptimizerConfig,
    warm: Option<&DVector<f64>>,
) -> Result<MpcSelection> {
    let du = b.dims().du;
    check_dim("control box", du, bounds.dim())?;
    let obj = MpcObjective::new(b, buf, cp, goal_mean, horizon)?;
    if let Some(w) = warm {
        check_dim("warm start", du * horizon, w.len())?;
    }
    let (lo, hi) = bounds.repeated(horizon);
    let starts = default_starts(&lo, &hi, warm, cfg.random_starts, cfg.seed);
    let best = minimize_box(|s| obj.eval(s), &lo, &hi, &starts, cfg);
    if !best.converged {
        log::warn!("MPC optimization stopped on its evaluation budget");
    }
    let control = best.x.rows(0, du).into_owned();
    assert!(bounds.contains(&control), "MPC control must stay inside the control box");
    Ok(MpcSelection {
        control,
        sequence: best.x,
        cost: best.value,
        converged: best.converged,
    })
}
