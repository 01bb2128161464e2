use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use land_bench::fixture;
use land_core::geodesic::exp_endpoint;
use land_core::{log_map, GeodesicSolverConfig, Metric};

fn metric_eval(c: &mut Criterion) {
    let mut g = c.benchmark_group("metric_jacobian");
    for n in [100, 300, 1000] {
        let (data, metric) = fixture(n, 2, 0);
        let x = data.row(n / 2).to_vec();
        let mut diag = vec![0.0; 2];
        let mut jac = vec![0.0; 4];
        g.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| metric.diagonal_and_jacobian_into(black_box(x), &mut diag, &mut jac))
        });
    }
    g.finish();
}

fn exp(c: &mut Criterion) {
    let (data, metric) = fixture(300, 2, 0);
    let cfg = GeodesicSolverConfig::default();
    let x = data.row(0).to_vec();
    let v = vec![-0.3, 0.4];
    c.bench_function("exp_map_2d", |b| b.iter(|| exp_endpoint(&metric, black_box(&x), black_box(&v), &cfg).unwrap()));
}

fn log(c: &mut Criterion) {
    let mut g = c.benchmark_group("log_map_by_dim");
    g.sample_size(10);
    let cfg = GeodesicSolverConfig::default();
    for dim in [2, 5, 10] {
        let (data, metric) = fixture(300, dim, 0);
        let (x, y) = (data.row(0).to_vec(), data.row(45).to_vec());
        g.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |b, _| {
            b.iter(|| log_map(&metric, black_box(&x), black_box(&y), &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, metric_eval, exp, log);
criterion_main!(benches);
