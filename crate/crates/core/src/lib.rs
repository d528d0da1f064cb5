pub mod baseline;
pub mod check;
pub mod distributions;
pub mod error;
pub mod filter;
pub mod harness;
pub mod linalg;
pub mod optimize;
pub mod planner;
pub mod sim;

pub use baseline::{mpc_select, MpcSelection};
pub use distributions::{Gaussian, LocationScaleT, MatrixNormalWishart};
pub use error::{Error, Result};
pub use filter::{posterior_predictive, push_buffers, update_beliefs, Buffers, MarxBeliefs, ModelDims};
pub use harness::{run_sweep, run_trial, Agent, StepRecord, SweepResult, TrialConfig, TrialRecord, DESK_STEPS};
pub use linalg::Spd;
pub use optimize::OptimizerConfig;
pub use planner::{efe, plan, select_control, ControlBox, ControlPrior, GoalPrior, Plan, PlannerConfig, Selection};
pub use sim::{Plant, PlantConfig};
