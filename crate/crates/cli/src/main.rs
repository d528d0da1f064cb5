//! `marxefe run | sweep | check`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use marxefe_core::check;
use marxefe_core::harness::{self, write_aggregate_csv, write_trial_csv};
use marxefe_core::{Agent, Error, Result, TrialConfig, DESK_STEPS};

#[derive(Parser)]
#[command(name = "marxefe", version, about = "Autoregressive active-inference agent and MPC baseline on a simulated robot")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial and write its per-step CSV.
    Run(TrialArgs),
    /// Run several seeds in parallel and write the aggregate CSV.
    Sweep {
        #[command(flatten)]
        trial: TrialArgs,
        /// Number of seeds, counting up from the base seed.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
    /// Run the oracle and property checks.
    Check {
        /// Also run the multi-seed agent comparison (takes about a minute).
        #[arg(long)]
        comparison: bool,
        /// Trial length for the determinism and comparison checks.
        #[arg(long, default_value_t = DESK_STEPS)]
        steps: usize,
        /// Seeds per agent in the comparison.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
    },
}

#[derive(Args)]
struct TrialArgs {
    #[arg(long)]
    agent: Option<Agent>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
}

impl TrialArgs {
    fn resolve(&self, default_steps: usize) -> Result<TrialConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
                TrialConfig::from_text(&text)?
            }
            None => TrialConfig {
                steps: default_steps,
                ..TrialConfig::default()
            },
        };
        if let Some(a) = self.agent {
            cfg.agent = a;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.steps {
            cfg.steps = n;
        }
        if let Some(h) = self.horizon {
            cfg.horizon = h;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn writer(&self) -> Result<Box<dyn Write>> {
        Ok(match &self.out {
            Some(path) => Box::new(BufWriter::new(
                File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?,
            )),
            None => Box::new(BufWriter::new(io::stdout().lock())),
        })
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve(TrialConfig::default().steps)?;
            let rec = harness::run_trial(&cfg)?;
            let mut w = args.writer()?;
            write_trial_csv(&rec, &mut w)?;
            w.flush()?;
            if rec.unconverged_steps > 0 || rec.laplace_fallbacks > 0 {
                eprintln!(
                    "note: {} steps with unconverged optimizer, {} Laplace fallbacks",
                    rec.unconverged_steps, rec.laplace_fallbacks
                );
            }
            Ok(true)
        }
        Command::Sweep { trial, seeds } => {
            let cfg = trial.resolve(DESK_STEPS)?;
            let res = harness::run_sweep(&cfg, seeds)?;
            let mut w = trial.writer()?;
            write_aggregate_csv(&cfg, seeds, &res.aggregate, &mut w)?;
            w.flush()?;
            Ok(true)
        }
        Command::Check { comparison, steps, seeds } => {
            let mut all = true;
            for o in check::fixture_checks(steps) {
                println!("{o}");
                all &= o.passed;
            }
            if comparison {
                let (_, outcomes) = check::agent_comparison(steps, seeds)?;
                for o in outcomes {
                    println!("{o}");
                    all &= o.passed;
                }
            }
            Ok(all)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error kind={} message=\"{}\"", e.kind(), e.to_string().replace('"', "'"));
            ExitCode::from(2)
        }
    }
}
