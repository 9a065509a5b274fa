use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use tdkoopman::experiment::{run_train, Scenario};
use tdkoopman::history_lqr::synthesize_for_model;
use tdkoopman::hybrid_sim::simulate;
use tdkoopman::numkernel::{pinv, DareOptions};
use tdkoopman::tde_koopman::{build_hankel_pair, delay_window, rollout_predict};
use tdkoopman::{DisturbanceSchedule, ExperimentConfig, KoopmanModel};

const PENDULUM: &str = r#"
system = "pendulum"
dt = 0.01
train_duration = 6.0
control_duration = 6.0

[hankel]
delays = 110
columns = 90
pinv_rtol = 1e-4
"#;

fn kernels(c: &mut Criterion) {
    let cfg = ExperimentConfig::from_toml_str(PENDULUM).unwrap();
    let train = run_train(&cfg).unwrap();
    let hp = cfg.hankel_params();
    let rtol = cfg.hankel.pinv_rtol;
    let (h0, _) = build_hankel_pair(&train.training, &hp, 0).unwrap();

    c.bench_function("pinv 333x91", |b| b.iter(|| pinv(black_box(&h0), rtol).unwrap()));

    c.bench_function("fit pendulum model", |b| {
        b.iter(|| KoopmanModel::fit(black_box(&train.training), &hp, rtol, 0).unwrap())
    });

    let window = delay_window(&train.training, hp.delays, hp.delays).unwrap();
    c.bench_function("rollout 490 steps", |b| {
        b.iter(|| rollout_predict(&train.model, black_box(&window), 490).unwrap())
    });

    let mut group = c.benchmark_group("slow");
    group.sample_size(10);
    group.bench_function("dare 222 states", |b| {
        b.iter(|| synthesize_for_model(black_box(&train.model), 1.0, 1.0, &DareOptions::default()).unwrap())
    });
    group.finish();

    let scenario = Scenario::build(&cfg).unwrap();
    c.bench_function("simulate pendulum 601 samples", |b| {
        b.iter(|| {
            let mut law = scenario.law;
            simulate(
                &scenario.spec,
                black_box(&scenario.x0),
                &mut law,
                601,
                0.01,
                &DisturbanceSchedule::none(),
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
