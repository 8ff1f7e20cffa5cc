use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mwal_bench::fixture;
use mwal_core::gcca::{fit_gcca, GccaOptions};
use mwal_core::linalg::orthogonal_procrustes;
use mwal_core::{fit_corrector, fit_gpa, GpaConfig, TrainConfig, Trust};
use std::hint::black_box;

fn procrustes(c: &mut Criterion) {
    let mut group = c.benchmark_group("procrustes");
    for d in [16, 64, 128] {
        let spaces = fixture(2, 1000, d, 1);
        group.bench_with_input(BenchmarkId::from_parameter(d), &spaces, |b, s| {
            b.iter(|| orthogonal_procrustes(black_box(&s[0].data), black_box(&s[1].data)).unwrap())
        });
    }
    group.finish();
}

fn gpa(c: &mut Criterion) {
    let mut group = c.benchmark_group("gpa_fit");
    group.sample_size(20);
    for m in [3, 5, 8] {
        let spaces = fixture(m, 1000, 32, 2);
        group.bench_with_input(BenchmarkId::from_parameter(m), &spaces, |b, s| {
            b.iter(|| fit_gpa(black_box(s), &GpaConfig::default()).unwrap())
        });
    }
    group.finish();
}

fn gcca(c: &mut Criterion) {
    let mut group = c.benchmark_group("gcca_fit");
    group.sample_size(20);
    for m in [3, 5, 8] {
        let spaces = fixture(m, 1000, 32, 3);
        group.bench_with_input(BenchmarkId::from_parameter(m), &spaces, |b, s| {
            b.iter(|| fit_gcca(black_box(s), &GccaOptions::new(16)).unwrap())
        });
    }
    group.finish();
}

fn gcpa(c: &mut Criterion) {
    let spaces = fixture(3, 500, 16, 4);
    let universe = fit_gpa(&spaces, &GpaConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("gcpa_fit");
    group.sample_size(10);
    group.bench_function("5_epochs", |b| {
        b.iter(|| fit_corrector(&universe, black_box(&spaces), &cfg, Trust::default()).unwrap())
    });
    group.finish();
}

criterion_group!(benches, procrustes, gpa, gcca, gcpa);
criterion_main!(benches);
