use std::hint::black_box;
use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ladistill::distill;
use ladistill::evalkit::{self, EvalConfig, PolicySpec, ScenarioSuite};
use ladistill::linksim::RandomizationRanges;
use ladistill::net::DenseNet;
use ladistill::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_evaluate(c: &mut Criterion) {
    let net = DenseNet::init(&[16, 32, 32, 32, 28], 1).unwrap();
    let policy = PolicySpec::greedy("student", &net);
    let suite = ScenarioSuite::standard();
    let scenario = suite.get("MIMO").unwrap();
    let cfg = EvalConfig {
        n_episodes: 500,
        ..EvalConfig::default()
    };
    let mut group = c.benchmark_group("evaluate_mimo_500");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evalkit::evaluate(&policy, scenario, &cfg, 3, exec).unwrap()))
        });
    }
    group.finish();
}

fn bench_gen_dataset(c: &mut Criterion) {
    let net = DenseNet::init(&[16, 64, 64, 64, 64, 28], 2).unwrap();
    let ranges = RandomizationRanges::standard();
    let mut group = c.benchmark_group("gen_dataset_8000");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(distill::gen_dataset(&net, &ranges, 8000, 5, 0.5, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(
    name = benches;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5));
    targets = bench_evaluate, bench_gen_dataset
);
criterion_main!(benches);
