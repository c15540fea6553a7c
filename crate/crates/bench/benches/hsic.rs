use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use che_bench::embedding_pairs;
use che_core::hsic::{hsic_local, hsic_weight_gradient};
use che_core::trainer::mean_weighted_hsic;
use che_core::{HsicConfig, SigmaPolicy};

fn local(c: &mut Criterion) {
    let mut group = c.benchmark_group("hsic_local");
    for r in [8, 16, 32, 64] {
        let cfg = HsicConfig::new(SigmaPolicy::MedianHeuristic, r).unwrap();
        let (x, y) = embedding_pairs(1, r, 1).pop().unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(r), &r, |b, _| b.iter(|| hsic_local(black_box(&x), black_box(&y), &cfg).unwrap()));
    }
    group.finish();
}

fn weight_gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("hsic_weight_gradient");
    for r in [16, 32] {
        let cfg = HsicConfig::new(SigmaPolicy::MedianHeuristic, r).unwrap();
        let (x, y) = embedding_pairs(1, r, 2).pop().unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(r), &r, |b, _| {
            b.iter(|| hsic_weight_gradient(black_box(&x), black_box(&y), 1.3, &cfg).unwrap())
        });
    }
    group.finish();
}

fn full_pass(c: &mut Criterion) {
    let mut group = c.benchmark_group("mean_weighted_hsic");
    let cfg = HsicConfig::new(SigmaPolicy::MedianHeuristic, 16).unwrap();
    for n in [500, 1000, 2000] {
        let pairs = embedding_pairs(n, 16, 3);
        let weights = vec![1.0; n];
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| mean_weighted_hsic(&pairs, &weights, &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, local, weight_gradient, full_pass);
criterion_main!(benches);
