//! Closed-loop trials of an agent against the simulated robot, CSV logging
//! and multi-seed sweeps.

mod config;

pub use config::{Agent, TrialConfig, DESK_STEPS};

use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::baseline::{mpc_select, shift_sequence};
use crate::distributions::Gaussian;
use crate::error::{Error, Result};
use crate::filter::{negative_log_evidence, update_beliefs, Buffers, MarxBeliefs, ModelDims};
use crate::linalg::Spd;
use crate::planner::{plan, ControlBox, ControlPrior, GoalPrior, PlannerConfig};
use crate::sim::Plant;

/// Logged quantities per step, in CSV column order after `k` and `t`.
pub const METRICS: [&str; 7] = ["y1", "y2", "u1", "u2", "free_energy", "dist_to_goal", "ctrl_norm"];

pub const TRIAL_HEADER: &str = "k,t,y1,y2,u1,u2,free_energy,dist_to_goal,ctrl_norm";

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub y: [f64; 2],
    pub u: [f64; 2],
    /// `−ln p(y_k | u_k, D_{k−1})` in nats.
    pub free_energy: f64,
    pub dist_to_goal: f64,
    pub ctrl_norm: f64,
}

impl StepRecord {
    pub fn metrics(&self) -> [f64; 7] {
        [
            self.y[0],
            self.y[1],
            self.u[0],
            self.u[1],
            self.free_energy,
            self.dist_to_goal,
            self.ctrl_norm,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub config: TrialConfig,
    pub rows: Vec<StepRecord>,
    pub final_beliefs: MarxBeliefs,
    /// Steps whose control optimization hit its evaluation budget.
    pub unconverged_steps: usize,
    pub laplace_fallbacks: usize,
}

pub fn model_dims(cfg: &TrialConfig) -> ModelDims {
    ModelDims::new(2, 2, cfg.mem_u, cfg.mem_y)
}

pub fn initial_beliefs(cfg: &TrialConfig) -> Result<MarxBeliefs> {
    MarxBeliefs::isotropic(
        model_dims(cfg),
        cfg.prior_dof,
        cfg.resolved_mean_scale(),
        cfg.prior_row_precision,
        cfg.prior_scale,
    )
}

pub fn goal_prior(cfg: &TrialConfig) -> Result<GoalPrior> {
    Gaussian::new(
        DVector::from_column_slice(&cfg.goal_mean),
        Spd::scaled_identity(2, cfg.goal_cov),
    )
}

pub fn control_box(cfg: &TrialConfig) -> Result<ControlBox> {
    ControlBox::new(
        DVector::from_column_slice(&cfg.box_lo),
        DVector::from_column_slice(&cfg.box_hi),
    )
}

fn at_step(step: usize) -> impl FnOnce(Error) -> Error {
    move |e| Error::AtStep {
        step,
        source: Box::new(e),
    }
}

/// Runs one closed-loop trial. Deterministic given the config.
pub fn run_trial(cfg: &TrialConfig) -> Result<TrialRecord> {
    cfg.validate()?;
    let goal = goal_prior(cfg)?;
    let bounds = control_box(cfg)?;
    let cp = ControlPrior::isotropic(2, cfg.control_precision);
    let planner_cfg = PlannerConfig {
        horizon: cfg.horizon,
        sweeps: cfg.sweeps,
        optimizer: cfg.optimizer.clone(),
    };
    let mut plant = Plant::new(cfg.plant.clone(), cfg.seed)?.with_control_bounds(bounds.clone());
    let mut beliefs = initial_beliefs(cfg)?;
    let mut buf = Buffers::zeros(model_dims(cfg));
    let mut warm: Option<DVector<f64>> = None;
    let mut rows = Vec::with_capacity(cfg.steps);
    let (mut unconverged, mut fallbacks) = (0, 0);

    for k in 1..=cfg.steps {
        let u = match cfg.agent {
            Agent::Efe => {
                let p = plan(&beliefs, &buf, &goal, &cp, &bounds, &planner_cfg).map_err(at_step(k))?;
                unconverged += usize::from(!p.converged);
                fallbacks += p.laplace_fallbacks;
                p.controls[0].clone()
            }
            Agent::Mpc => {
                let shifted = warm.as_ref().map(|s| shift_sequence(s, 2));
                let s = mpc_select(&beliefs, &buf, &cp, &bounds, &goal.mean, cfg.horizon, &cfg.optimizer, shifted.as_ref())
                    .map_err(at_step(k))?;
                unconverged += usize::from(!s.converged);
                warm = Some(s.sequence);
                s.control
            }
        };
        assert!(bounds.contains(&u), "step {k}: control {u:?} left the box");
        let y = plant.step(&u).map_err(at_step(k))?;
        let free_energy = negative_log_evidence(&beliefs, &u, &y, &buf).map_err(at_step(k))?;
        beliefs = update_beliefs(&beliefs, &u, &y, &buf).map_err(at_step(k))?;
        buf.push(&u, &y).map_err(at_step(k))?;
        rows.push(StepRecord {
            k,
            t: k as f64 * cfg.plant.dt,
            y: [y[0], y[1]],
            u: [u[0], u[1]],
            free_energy,
            dist_to_goal: (&y - &goal.mean).norm(),
            ctrl_norm: u.norm(),
        });
        if k % 500 == 0 {
            log::debug!("seed {} {}: step {k}/{}", cfg.seed, cfg.agent, cfg.steps);
        }
    }
    if unconverged > 0 {
        log::info!("seed {}: {unconverged} steps stopped on the optimizer budget", cfg.seed);
    }
    Ok(TrialRecord {
        config: cfg.clone(),
        rows,
        final_beliefs: beliefs,
        unconverged_steps: unconverged,
        laplace_fallbacks: fallbacks,
    })
}

/// Recomputes the free-energy column by running the filter over logged
/// controls and outputs.
pub fn replay_free_energy(cfg: &TrialConfig, rows: &[StepRecord]) -> Result<Vec<f64>> {
    let mut beliefs = initial_beliefs(cfg)?;
    let mut buf = Buffers::zeros(model_dims(cfg));
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let u = DVector::from_column_slice(&r.u);
        let y = DVector::from_column_slice(&r.y);
        out.push(negative_log_evidence(&beliefs, &u, &y, &buf).map_err(at_step(r.k))?);
        beliefs = update_beliefs(&beliefs, &u, &y, &buf).map_err(at_step(r.k))?;
        buf.push(&u, &y)?;
    }
    Ok(out)
}

fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_comment_header(w: &mut impl Write, cfg: &TrialConfig, extra: &[String]) -> Result<()> {
    for line in extra {
        writeln!(w, "# {line}")?;
    }
    for line in cfg.to_text().lines() {
        writeln!(w, "# {line}")?;
    }
    Ok(())
}

/// Writes a trial as CSV: `#` config header, column header, one row per
/// step with floats at 17 significant digits.
pub fn write_trial_csv(rec: &TrialRecord, w: &mut impl Write) -> Result<()> {
    write_comment_header(w, &rec.config, &[format!("trial seed {}", rec.config.seed)])?;
    writeln!(w, "{TRIAL_HEADER}")?;
    for r in &rec.rows {
        let fields: Vec<String> = std::iter::once(r.k.to_string())
            .chain(std::iter::once(fmt_float(r.t)))
            .chain(r.metrics().iter().map(|v| fmt_float(*v)))
            .collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn trial_csv_string(rec: &TrialRecord) -> String {
    let mut out = Vec::new();
    write_trial_csv(rec, &mut out).expect("writing to memory cannot fail");
    String::from_utf8(out).expect("csv is ascii")
}

/// Reads rows written by [`write_trial_csv`], together with the embedded
/// config.
pub fn parse_trial_csv(text: &str) -> Result<(TrialConfig, Vec<StepRecord>)> {
    let mut cfg_text = String::new();
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Config { line: i + 1, message };
        if let Some(c) = line.strip_prefix("# ") {
            if c.contains('=') {
                cfg_text.push_str(c);
                cfg_text.push('\n');
            }
            continue;
        }
        if !seen_header {
            if line != TRIAL_HEADER {
                return Err(err(format!("expected header `{TRIAL_HEADER}`")));
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(err(format!("expected 9 fields, got {}", fields.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| err(format!("bad number `{s}`")));
        let k = fields[0].parse::<usize>().map_err(|_| err(format!("bad step `{}`", fields[0])))?;
        rows.push(StepRecord {
            k,
            t: num(fields[1])?,
            y: [num(fields[2])?, num(fields[3])?],
            u: [num(fields[4])?, num(fields[5])?],
            free_energy: num(fields[6])?,
            dist_to_goal: num(fields[7])?,
            ctrl_norm: num(fields[8])?,
        });
    }
    Ok((TrialConfig::from_text(&cfg_text)?, rows))
}

/// Per-step population mean and standard deviation of each metric.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub k: usize,
    pub t: f64,
    pub mean: [f64; 7],
    pub std: [f64; 7],
}

/// Aggregates trials of equal length step by step.
pub fn aggregate(trials: &[&[StepRecord]]) -> Vec<AggregateRow> {
    assert!(!trials.is_empty(), "aggregate needs at least one trial");
    let n_steps = trials[0].len();
    assert!(trials.iter().all(|t| t.len() == n_steps), "trials differ in length");
    let n = trials.len() as f64;
    (0..n_steps)
        .map(|i| {
            let mut mean = [0.0; 7];
            for t in trials {
                for (m, v) in mean.iter_mut().zip(t[i].metrics()) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut std = [0.0; 7];
            for t in trials {
                for ((s, v), m) in std.iter_mut().zip(t[i].metrics()).zip(mean) {
                    *s += (v - m) * (v - m);
                }
            }
            std.iter_mut().for_each(|s| *s = (*s / n).sqrt());
            AggregateRow {
                k: trials[0][i].k,
                t: trials[0][i].t,
                mean,
                std,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub trials: Vec<TrialRecord>,
    pub aggregate: Vec<AggregateRow>,
}

/// Seeds used by a sweep of `n_seeds` trials starting from `cfg.seed`.
pub fn sweep_seeds(cfg: &TrialConfig, n_seeds: usize) -> Vec<u64> {
    (0..n_seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect()
}

/// Runs `n_seeds` trials in parallel, varying only the seed.
pub fn run_sweep(cfg: &TrialConfig, n_seeds: usize) -> Result<SweepResult> {
    if n_seeds == 0 {
        return Err(Error::InvalidParameter {
            name: "n_seeds",
            reason: "must be at least 1".into(),
        });
    }
    let results: Vec<(u64, Result<TrialRecord>)> = sweep_seeds(cfg, n_seeds)
        .into_par_iter()
        .map(|seed| {
            let c = TrialConfig { seed, ..cfg.clone() };
            (seed, run_trial(&c))
        })
        .collect();
    let mut trials = Vec::with_capacity(n_seeds);
    for (seed, r) in results {
        trials.push(r.map_err(|e| Error::SeedFailed {
            seed,
            source: Box::new(e),
        })?);
    }
    let rows: Vec<&[StepRecord]> = trials.iter().map(|t| t.rows.as_slice()).collect();
    let aggregate = aggregate(&rows);
    Ok(SweepResult { trials, aggregate })
}

pub fn aggregate_header() -> String {
    let mut cols = vec!["k".to_string(), "t".to_string()];
    for m in METRICS {
        cols.push(format!("{m}_mean"));
        cols.push(format!("{m}_std"));
    }
    cols.join(",")
}

pub fn write_aggregate_csv(cfg: &TrialConfig, n_seeds: usize, rows: &[AggregateRow], w: &mut impl Write) -> Result<()> {
    let seeds: Vec<String> = sweep_seeds(cfg, n_seeds).iter().map(u64::to_string).collect();
    write_comment_header(w, cfg, &[format!("sweep seeds {}", seeds.join(" "))])?;
    writeln!(w, "{}", aggregate_header())?;
    for r in rows {
        let mut fields = vec![r.k.to_string(), fmt_float(r.t)];
        for j in 0..7 {
            fields.push(fmt_float(r.mean[j]));
            fields.push(fmt_float(r.std[j]));
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}
