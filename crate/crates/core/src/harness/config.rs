//! Flat `key = value` trial configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Arrays are written
//! `[a, b, ...]`. Unknown keys are errors. Anything not set keeps its
//! default.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::optimize::OptimizerConfig;
use crate::sim::PlantConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Agent {
    Efe,
    Mpc,
}

impl fmt::Display for Agent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Agent::Efe => "efe",
            Agent::Mpc => "mpc",
        })
    }
}

impl FromStr for Agent {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "efe" => Ok(Agent::Efe),
            "mpc" => Ok(Agent::Mpc),
            other => Err(format!("unknown agent `{other}` (expected efe or mpc)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialConfig {
    pub agent: Agent,
    pub steps: usize,
    pub horizon: usize,
    pub sweeps: usize,
    pub mem_u: usize,
    pub mem_y: usize,
    pub prior_dof: f64,
    /// Diagonal of `M₀`; `None` means `1/(D_x D_y)`.
    pub prior_mean_scale: Option<f64>,
    pub prior_row_precision: f64,
    pub prior_scale: f64,
    pub control_precision: f64,
    pub goal_mean: [f64; 2],
    pub goal_cov: f64,
    pub box_lo: [f64; 2],
    pub box_hi: [f64; 2],
    pub plant: PlantConfig,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            agent: Agent::Efe,
            steps: 10_000,
            horizon: 3,
            sweeps: 1,
            mem_u: 2,
            mem_y: 2,
            prior_dof: 100.0,
            prior_mean_scale: None,
            prior_row_precision: 1e-2,
            prior_scale: 1.0,
            control_precision: 1e-6,
            goal_mean: [0.0, 1.0],
            goal_cov: 1e-6,
            box_lo: [-1.0, -1.0],
            box_hi: [1.0, 1.0],
            plant: PlantConfig::default(),
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Steps used by the test suites and the `sweep` default.
pub const DESK_STEPS: usize = 2000;

impl TrialConfig {
    /// Defaults with `steps` shortened to [`DESK_STEPS`].
    pub fn desk() -> Self {
        Self {
            steps: DESK_STEPS,
            ..Self::default()
        }
    }

    pub fn dx(&self) -> usize {
        2 * (self.mem_u + 1) + 2 * self.mem_y
    }

    pub fn resolved_mean_scale(&self) -> f64 {
        self.prior_mean_scale.unwrap_or(1.0 / (self.dx() * 2) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.to_string(),
            })
        };
        if self.steps == 0 {
            return bad("steps", "must be at least 1");
        }
        if self.horizon == 0 {
            return bad("horizon", "must be at least 1");
        }
        // the EFE needs a finite predictive variance: η = ν₀ − 1 > 2
        if !(self.prior_dof > 3.0 && self.prior_dof.is_finite()) {
            return bad("prior_dof", "must exceed 3");
        }
        for (name, v) in [
            ("prior_row_precision", self.prior_row_precision),
            ("prior_scale", self.prior_scale),
            ("control_precision", self.control_precision),
            ("goal_cov", self.goal_cov),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, "must be positive and finite");
            }
        }
        if !self.resolved_mean_scale().is_finite() {
            return bad("prior_mean_scale", "must be finite");
        }
        if self.goal_mean.iter().any(|v| !v.is_finite()) {
            return bad("goal_mean", "must be finite");
        }
        if (0..2).any(|i| !(self.box_lo[i] < self.box_hi[i]) || !self.box_lo[i].is_finite() || !self.box_hi[i].is_finite()) {
            return bad("box_lo", "each lower bound must be below its upper bound");
        }
        if self.optimizer.max_evals_per_start < 8 {
            return bad("optimizer_max_evals", "must be at least 8");
        }
        self.plant.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Config { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "agent" => self.agent = value.parse()?,
            "steps" => self.steps = scalar(key, value)?,
            "horizon" => self.horizon = scalar(key, value)?,
            "sweeps" => self.sweeps = scalar(key, value)?,
            "mem_u" => self.mem_u = scalar(key, value)?,
            "mem_y" => self.mem_y = scalar(key, value)?,
            "prior_dof" => self.prior_dof = scalar(key, value)?,
            "prior_mean_scale" => {
                self.prior_mean_scale = if value == "auto" { None } else { Some(scalar(key, value)?) }
            }
            "prior_row_precision" => self.prior_row_precision = scalar(key, value)?,
            "prior_scale" => self.prior_scale = scalar(key, value)?,
            "control_precision" => self.control_precision = scalar(key, value)?,
            "goal_mean" => self.goal_mean = array(key, value)?,
            "goal_cov" => self.goal_cov = scalar(key, value)?,
            "box_lo" => self.box_lo = array(key, value)?,
            "box_hi" => self.box_hi = array(key, value)?,
            "dt" => self.plant.dt = scalar(key, value)?,
            "process_noise" => self.plant.process_noise = array(key, value)?,
            "measurement_noise" => self.plant.measurement_noise = array(key, value)?,
            "z0" => self.plant.z0 = array(key, value)?,
            "seed" => self.seed = scalar(key, value)?,
            "optimizer_random_starts" => self.optimizer.random_starts = scalar(key, value)?,
            "optimizer_max_evals" => self.optimizer.max_evals_per_start = scalar(key, value)?,
            "optimizer_seed" => self.optimizer.seed = scalar(key, value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let arr = |xs: &[f64]| {
            let items: Vec<String> = xs.iter().map(|x| format!("{x:?}")).collect();
            format!("[{}]", items.join(", "))
        };
        let lines = [
            format!("agent = {}", self.agent),
            format!("steps = {}", self.steps),
            format!("horizon = {}", self.horizon),
            format!("sweeps = {}", self.sweeps),
            format!("mem_u = {}", self.mem_u),
            format!("mem_y = {}", self.mem_y),
            format!("prior_dof = {:?}", self.prior_dof),
            format!("prior_mean_scale = {:?}", self.resolved_mean_scale()),
            format!("prior_row_precision = {:?}", self.prior_row_precision),
            format!("prior_scale = {:?}", self.prior_scale),
            format!("control_precision = {:?}", self.control_precision),
            format!("goal_mean = {}", arr(&self.goal_mean)),
            format!("goal_cov = {:?}", self.goal_cov),
            format!("box_lo = {}", arr(&self.box_lo)),
            format!("box_hi = {}", arr(&self.box_hi)),
            format!("dt = {:?}", self.plant.dt),
            format!("process_noise = {}", arr(&self.plant.process_noise)),
            format!("measurement_noise = {}", arr(&self.plant.measurement_noise)),
            format!("z0 = {}", arr(&self.plant.z0)),
            format!("seed = {}", self.seed),
            format!("optimizer_random_starts = {}", self.optimizer.random_starts),
            format!("optimizer_max_evals = {}", self.optimizer.max_evals_per_start),
            format!("optimizer_seed = {}", self.optimizer.seed),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn scalar<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("cannot parse `{value}` for `{key}`"))
}

fn array<const N: usize>(key: &str, value: &str) -> std::result::Result<[f64; N], String> {
    let inner = value
        .strip_prefix('[')
        .and_then(|v| v.strip_suffix(']'))
        .ok_or_else(|| format!("`{key}` must be a bracketed array"))?;
    let items: Vec<f64> = inner
        .split(',')
        .map(|s| scalar::<f64>(key, s.trim()))
        .collect::<std::result::Result<_, _>>()?;
    items
        .try_into()
        .map_err(|v: Vec<f64>| format!("`{key}` needs {N} entries, got {}", v.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_experiment() {
        let c = TrialConfig::default();
        assert_eq!(c.prior_dof, 100.0);
        assert_eq!(c.plant.dt, 0.1);
        assert_eq!(c.horizon, 3);
        assert_eq!(c.steps, 10_000);
        assert_eq!((c.mem_u, c.mem_y), (2, 2));
        assert_eq!(c.dx(), 10);
        assert_eq!(c.resolved_mean_scale(), 0.05);
        assert_eq!(c.goal_mean, [0.0, 1.0]);
        assert_eq!(c.goal_cov, 1e-6);
        assert_eq!(c.control_precision, 1e-6);
        assert_eq!(c.plant.process_noise, [1e-6, 1e-6]);
        assert_eq!(c.plant.measurement_noise, [1e-3, 1e-3]);
        assert_eq!(TrialConfig::desk().steps, 2000);
    }

    #[test]
    fn parses_and_round_trips() {
        let text = "# a comment\n\nagent = mpc\nsteps = 12\ngoal_mean = [0.5, -1e-3]\nz0 = [1, 2, 3, 4]\nprior_mean_scale = auto\n";
        let c = TrialConfig::from_text(text).unwrap();
        assert_eq!(c.agent, Agent::Mpc);
        assert_eq!(c.steps, 12);
        assert_eq!(c.goal_mean, [0.5, -1e-3]);
        assert_eq!(c.plant.z0, [1.0, 2.0, 3.0, 4.0]);
        let again = TrialConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(again.to_text(), c.to_text());
        assert_eq!(again.prior_mean_scale, Some(0.05));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = TrialConfig::from_text("steps = 3\nbogus = 1\n").unwrap_err();
        assert_eq!(e, Error::Config { line: 2, message: "unknown key `bogus`".into() });
        assert!(matches!(TrialConfig::from_text("steps 3"), Err(Error::Config { line: 1, .. })));
        assert!(TrialConfig::from_text("goal_mean = [1, 2, 3]").is_err());
        assert!(TrialConfig::from_text("goal_mean = 1").is_err());
        assert!(TrialConfig::from_text("agent = pid").is_err());
        assert!(TrialConfig::from_text("steps = 0").is_err());
        assert!(TrialConfig::from_text("box_lo = [1, -1]").is_err());
        assert!(TrialConfig::from_text("prior_dof = 2").is_err());
    }
}
