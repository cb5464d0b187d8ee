use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nldecay::analysis::{gramian_constant, uniformity_sweep, SweepCell, SweepSpec};
use nldecay::exec::Executor;
use nldecay::feedback::FeedbackMap;
use nldecay::integrate::{TimeScheme, TimeViscosity};
use nldecay::models::{build_model, ModelKind, ModelSpec, Probe};

fn executors() -> [(&'static str, Executor); 2] {
    [("sequential", Executor::sequential()), ("parallel", Executor::new(0))]
}

fn gramian(c: &mut Criterion) {
    let f = FeedbackMap::catalog("linear", None, None).unwrap();
    let sys = build_model(&ModelSpec::new(ModelKind::Wave1d, 64, f)).unwrap();
    let scheme = TimeScheme::default_for(&sys);
    let mut group = c.benchmark_group("gramian_constant");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| gramian_constant(&sys, 2.0, true, &scheme, &exec).unwrap())
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let f = FeedbackMap::catalog("power", Some(3.0), None).unwrap();
    let cells = vec![
        SweepCell::new("plain", 0.5, false, TimeViscosity::None),
        SweepCell::new("viscous", 0.5, true, TimeViscosity::Squared),
    ];
    let spec = SweepSpec::new(ModelSpec::new(ModelKind::Wave1d, 32, f), vec![32, 48, 64], cells, Probe::Smooth, 2.0);
    let mut group = c.benchmark_group("uniformity_sweep");
    group.sample_size(10);
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| uniformity_sweep(&spec, &exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, gramian, sweep);
criterion_main!(benches);
