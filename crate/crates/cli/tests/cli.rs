use std::process::Command;

use marxefe_core::harness::{parse_trial_csv, TRIAL_HEADER};
use marxefe_core::Agent;

fn marxefe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_marxefe"))
}

#[test]
fn run_writes_trial_csv_with_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("trial.csv");
    let status = marxefe()
        .args(["run", "--agent", "mpc", "--seed", "7", "--steps", "25", "--horizon", "2", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# trial seed 7\n"));
    assert!(text.contains(TRIAL_HEADER));
    let (cfg, rows) = parse_trial_csv(&text).unwrap();
    assert_eq!(cfg.agent, Agent::Mpc);
    assert_eq!((cfg.seed, cfg.steps, cfg.horizon), (7, 25, 2));
    assert_eq!(rows.len(), 25);
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("trial.conf");
    std::fs::write(&conf, "agent = mpc\nsteps = 5\nseed = 3\ngoal_mean = [0.2, 0.4]\n").unwrap();
    let out = marxefe()
        .args(["run", "--steps", "8", "--config"])
        .arg(&conf)
        .output()
        .unwrap();
    assert!(out.status.success());
    let (cfg, rows) = parse_trial_csv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.goal_mean, [0.2, 0.4]);
}

#[test]
fn same_seed_gives_identical_output() {
    let go = || {
        marxefe()
            .args(["run", "--agent", "efe", "--seed", "11", "--steps", "15"])
            .output()
            .unwrap()
            .stdout
    };
    assert_eq!(go(), go());
}

#[test]
fn sweep_writes_aggregate() {
    let out = marxefe()
        .args(["sweep", "--agent", "mpc", "--seeds", "3", "--steps", "10", "--seed", "4"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# sweep seeds 4 5 6\n"));
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(data[0].starts_with("k,t,y1_mean,y1_std,"));
    assert_eq!(data.len(), 11);
}

#[test]
fn bad_config_gives_machine_readable_error() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "steps = 5\nwidth = 3\n").unwrap();
    let out = marxefe().args(["run", "--config"]).arg(&conf).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error kind=config "), "{err}");
    assert!(err.contains("line 2"));

    let out = marxefe().args(["run", "--config", "/nonexistent/x.conf"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=io "));

    let out = marxefe().args(["run", "--steps", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=invalid_parameter "));
}

#[test]
fn unknown_agent_is_rejected() {
    let out = marxefe().args(["run", "--agent", "pid"]).output().unwrap();
    assert!(!out.status.success());
}
