use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use pnml_bench::{gaussian_embeddings, random_probs, score_lists};
use pnml_core::metrics::{evaluate, ScoreDirection};
use pnml_core::pipeline::{prepare, score_batch};

fn bench_prepare(c: &mut Criterion) {
    let mut group = c.benchmark_group("prepare");
    for dim in [64, 256, 512] {
        let train = gaussian_embeddings(4 * dim, dim, 1);
        group.bench_with_input(BenchmarkId::from_parameter(dim), &train, |b, t| {
            b.iter(|| prepare(black_box(t)).unwrap())
        });
    }
    group.finish();
}

fn bench_score(c: &mut Criterion) {
    let mut group = c.benchmark_group("score_batch");
    for dim in [64, 512] {
        let stats = prepare(&gaussian_embeddings(4 * dim, dim, 2)).unwrap();
        let test = gaussian_embeddings(1000, dim, 3);
        let probs = random_probs(1000, 10, 2.0, 4);
        group.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |b, _| {
            b.iter(|| score_batch(&stats, black_box(&test), &probs).unwrap())
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let (ind, ood) = score_lists(10_000, 1.0, 5);
    c.bench_function("evaluate_10k", |b| {
        b.iter(|| evaluate(black_box(&ind), black_box(&ood), ScoreDirection::HigherIsOod).unwrap())
    });
}

criterion_group!(benches, bench_prepare, bench_score, bench_metrics);
criterion_main!(benches);
