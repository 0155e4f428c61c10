use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use iman_core::clusterer::{cluster_pipeline, ClusterConfig};
use iman_core::kernelmmd::{
    median_heuristic, mmd2_biased, mmd2_biased_var, KernelSpec, DEFAULT_BANDWIDTH_SCALES,
};
use iman_core::numcore::{SeedRng, Tape};
use iman_core::Matrix;

fn sample(seed: u64, n: usize, d: usize) -> Matrix {
    let mut rng = SeedRng::new(seed);
    Matrix::from_fn(n, d, |_, _| rng.normal())
}

fn mmd(c: &mut Criterion) {
    let mut group = c.benchmark_group("mmd");
    for n in [64, 256] {
        let (x, y) = (sample(1, n, 16), sample(2, n, 16));
        let spec = KernelSpec::from_median_heuristic(&x, &y, &DEFAULT_BANDWIDTH_SCALES).unwrap();
        group.bench_with_input(BenchmarkId::new("value", n), &n, |b, _| {
            b.iter(|| mmd2_biased(black_box(&x), black_box(&y), &spec).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("value_and_grad", n), &n, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                let yv = tape.constant(y.clone());
                let loss = mmd2_biased_var(&mut tape, xv, yv, &spec).unwrap();
                tape.backward(loss).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("median_heuristic", n), &n, |b, _| {
            b.iter(|| median_heuristic(black_box(&x), black_box(&y)).unwrap())
        });
    }
    group.finish();
}

fn clustering(c: &mut Criterion) {
    let cfg = ClusterConfig::new(0.6, 3).unwrap();
    let mut group = c.benchmark_group("cluster_pipeline");
    for n in [300, 1200] {
        let x = sample(3, n, 8);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| cluster_pipeline(black_box(&x), &cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, mmd, clustering);
criterion_main!(benches);
