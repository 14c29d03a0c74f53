use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stalesgd_bench::{batch, model, vectors};
use stalesgd_core::{backward, gemm, ExactVecSum, Matrix};

fn bench_gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for n in [16usize, 64, 128] {
        let a = Matrix::from_vec(n, n, vectors(1, n * n, 1).remove(0)).unwrap();
        let b = Matrix::from_vec(n, n, vectors(1, n * n, 2).remove(0)).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| gemm(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_backward(c: &mut Criterion) {
    let mut g = c.benchmark_group("backward");
    let w = model(&[32, 32, 10], 1);
    for mu in [4usize, 16, 64] {
        let b = batch(&w, mu, 2);
        g.bench_with_input(BenchmarkId::new("mlp-32-32-10", mu), &mu, |bch, _| {
            bch.iter(|| backward(black_box(&w), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn bench_aggregation(c: &mut Criterion) {
    let mut g = c.benchmark_group("aggregate");
    let len = model(&[32, 32, 10], 1).len();
    for k in [4usize, 16] {
        let vs = vectors(k, len, 3);
        g.bench_with_input(BenchmarkId::new("exact", k), &k, |bch, _| {
            bch.iter(|| {
                let mut s = ExactVecSum::new(len);
                for v in &vs {
                    s.add(v).unwrap();
                }
                s.rounded()
            })
        });
        g.bench_with_input(BenchmarkId::new("naive", k), &k, |bch, _| {
            bch.iter(|| {
                let mut s = vec![0.0; len];
                for v in &vs {
                    for (a, b) in s.iter_mut().zip(v) {
                        *a += b;
                    }
                }
                black_box(s)
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_gemm, bench_backward, bench_aggregation);
criterion_main!(benches);
