use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use marxefe_core::check::control_fixture;
use marxefe_core::planner::EfeObjective;
use marxefe_core::{efe, mpc_select, plan, select_control, update_beliefs, ControlBox, OptimizerConfig, PlannerConfig};
use nalgebra::DVector;

fn agent(c: &mut Criterion) {
    let (b, buf, goal, cp) = control_fixture(3);
    let bounds = ControlBox::symmetric(2, 1.0).unwrap();
    let opt = OptimizerConfig::default();
    let u = DVector::from_column_slice(&[0.3, -0.4]);
    let y = DVector::from_column_slice(&[0.1, 0.2]);

    c.bench_function("efe", |bch| bch.iter(|| efe(black_box(&b), &buf, black_box(&u), &goal).unwrap()));
    let obj = EfeObjective::new(&b, &buf, &goal).unwrap();
    c.bench_function("efe_objective_eval", |bch| bch.iter(|| obj.eval(black_box(&u))));
    c.bench_function("update_beliefs", |bch| bch.iter(|| update_beliefs(black_box(&b), &u, &y, &buf).unwrap()));
    c.bench_function("select_control", |bch| bch.iter(|| select_control(&b, &buf, &goal, &cp, &bounds, &opt).unwrap()));
    let pcfg = PlannerConfig::default();
    c.bench_function("plan_h3", |bch| bch.iter(|| plan(&b, &buf, &goal, &cp, &bounds, &pcfg).unwrap()));
    c.bench_function("mpc_select_h3", |bch| {
        bch.iter(|| mpc_select(&b, &buf, &cp, &bounds, &goal.mean, 3, &opt, None).unwrap())
    });
}

criterion_group!(benches, agent);
criterion_main!(benches);
