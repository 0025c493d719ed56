use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mhattnsurv::eval::c_index;
use mhattnsurv::model::{backward, forward_batch, init_params};
use mhattnsurv::numerics::RngStream;
use mhattnsurv::train::cox_loss;
use mhattnsurv_bench::{normal_matrix, survival_batch};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut rng = RngStream::new(1, "bench/matmul");
    let mut group = c.benchmark_group("matmul");
    for n in [32, 256, 1000] {
        let x = normal_matrix(&mut rng, n, 1024);
        let w = normal_matrix(&mut rng, 1024, 1024);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| black_box(x.matmul(&w).unwrap()))
        });
    }
    group.finish();
}

fn mh_attention(c: &mut Criterion) {
    let mut rng = RngStream::new(2, "bench/mh");
    let d = 1024;
    let mut group = c.benchmark_group("mh_attention");
    group.sample_size(20);
    for h in [1, 4, 16] {
        let model = init_params(d, h, &mut rng).unwrap();
        let bags: Vec<_> = (0..8).map(|_| normal_matrix(&mut rng, 32, d)).collect();
        let refs: Vec<_> = bags.iter().collect();
        group.bench_with_input(BenchmarkId::new("forward", h), &h, |b, _| {
            b.iter(|| black_box(forward_batch(&model, &refs, None, None).unwrap()))
        });
        let state = forward_batch(&model, &refs, None, None).unwrap();
        let grad = vec![0.1; refs.len()];
        group.bench_with_input(BenchmarkId::new("backward", h), &h, |b, _| {
            b.iter(|| black_box(backward(&model, &state, &grad).unwrap()))
        });
    }
    group.finish();
}

fn survival_metrics(c: &mut Criterion) {
    let mut rng = RngStream::new(3, "bench/survival");
    let mut group = c.benchmark_group("survival");
    for n in [64, 1000, 10_000] {
        let (risks, times, events) = survival_batch(&mut rng, n);
        group.bench_with_input(BenchmarkId::new("cox_loss", n), &n, |b, _| {
            b.iter(|| black_box(cox_loss(&risks, &times, &events).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("c_index", n), &n, |b, _| {
            b.iter(|| black_box(c_index(&risks, &times, &events).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(kernels, matmul, mh_attention, survival_metrics);
criterion_main!(kernels);
