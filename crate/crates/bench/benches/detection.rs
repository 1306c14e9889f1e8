use std::time::Duration;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use csmud_bench::{large_system, Fixture};
use csmud_core::recovery::{biht, bomp, brute_force_oracle, default_step_size, iht, omp};
use csmud_core::{Architecture, SolverParams, SystemConfig};
use ndarray::s;

fn recovery(c: &mut Criterion) {
    let fx = Fixture::new(large_system(6), 16).unwrap();
    let (n, taps) = (fx.config.active, fx.config.taps);
    let greedy = SolverParams::greedy();
    let thr = SolverParams::thresholding().with_step_size(default_step_size(&fx.dictionary));
    let mut group = c.benchmark_group("recovery");
    group.sample_size(10).measurement_time(Duration::from_secs(5));
    let mut i = 0;
    let mut next = || {
        i = (i + 1) % fx.samples.len();
        &fx.samples[i].y
    };
    group.bench_function("omp", |b| b.iter(|| omp(&fx.dictionary, black_box(next()), n * taps, &greedy).unwrap()));
    group.bench_function("bomp", |b| b.iter(|| bomp(&fx.dictionary, black_box(next()), n, &greedy).unwrap()));
    group.bench_function("iht", |b| b.iter(|| iht(&fx.dictionary, black_box(next()), n * taps, &thr).unwrap()));
    group.bench_function("biht", |b| b.iter(|| biht(&fx.dictionary, black_box(next()), n, &thr).unwrap()));
    group.finish();
}

fn networks(c: &mut Criterion) {
    let fx = Fixture::new(large_system(6), 256).unwrap();
    let mut group = c.benchmark_group("network");
    for arch in [Architecture::Dnn, Architecture::Brnn] {
        let net = fx.network(arch).unwrap();
        let name = format!("{arch:?}").to_lowercase();
        group.bench_with_input(BenchmarkId::new(&name, 1), &net, |b, net| {
            b.iter(|| net.predict_scores(black_box(fx.features.slice(s![0..1, ..]))).unwrap())
        });
        group.bench_with_input(BenchmarkId::new(&name, 256), &net, |b, net| {
            b.iter(|| net.predict_scores(black_box(fx.features.view())).unwrap())
        });
    }
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let config = SystemConfig { users: 12, pilot_len: 10, taps: 2, active: 2, snr_db: 10.0, seed: 3 };
    let fx = Fixture::new(config, 4).unwrap();
    c.bench_function("oracle/12_choose_2", |b| {
        b.iter(|| brute_force_oracle(&fx.dictionary, black_box(&fx.samples[0].y), 2).unwrap())
    });
}

criterion_group!(benches, recovery, networks, oracle);
criterion_main!(benches);
