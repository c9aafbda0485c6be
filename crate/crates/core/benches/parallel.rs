use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fpdiff::par::Execution;
use fpdiff::rng::RngSpec;
use fpdiff::score::StationaryScore;
use fpdiff::sde::{ForwardModel, TimeSchedule};
use fpdiff::simulate::{integrate_flow_batch, simulate_batch, GaussianStart, ProbabilityFlow, TimeGrid};
use std::hint::black_box;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn forward_batch(c: &mut Criterion) {
    let model = ForwardModel::vp(3, TimeSchedule::default()).unwrap();
    let grid = TimeGrid::forward(&model, 200).unwrap();
    let mut group = c.benchmark_group("simulate_batch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, 4096), &exec, |b, &exec| {
            b.iter(|| {
                simulate_batch(
                    &model,
                    None,
                    &GaussianStart { std: 1.0 },
                    4096,
                    grid,
                    &[200],
                    RngSpec::for_purpose(0, "bench/simulate"),
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn flow_batch(c: &mut Criterion) {
    let model = ForwardModel::vp(2, TimeSchedule::default()).unwrap();
    let score = StationaryScore::new(2, 1.0);
    let flow = ProbabilityFlow::new(&model, &score).unwrap();
    let mut rng = RngSpec::for_purpose(0, "bench/flow").rng();
    let starts: Vec<f64> = (0..2 * 1024).map(|_| fpdiff::rng::normal(&mut rng)).collect();
    let mut group = c.benchmark_group("integrate_flow_batch");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, 1024), &exec, |b, &exec| {
            b.iter(|| integrate_flow_batch(&flow, black_box(&starts), 1e-5, 1.0, 100, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_batch, flow_batch);
criterion_main!(benches);
