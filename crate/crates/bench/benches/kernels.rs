use criterion::{black_box, criterion_group, criterion_main, Criterion};

use zdc_bench::dense;
use zdc_core::svd::svd;

fn bench_svd(c: &mut Criterion) {
    let small = dense(64, 16, 1);
    let large = dense(128, 32, 2);
    c.bench_function("svd 64x16", |b| b.iter(|| svd(black_box(&small)).unwrap()));
    c.bench_function("svd 128x32", |b| b.iter(|| svd(black_box(&large)).unwrap()));
}

fn bench_matmul(c: &mut Criterion) {
    let a = dense(128, 128, 3);
    let bm = dense(128, 128, 4);
    c.bench_function("matmul 128x128", |b| {
        b.iter(|| black_box(&a).matmul(black_box(&bm)).unwrap())
    });
    c.bench_function("matmul_transpose_b 128x128", |b| {
        b.iter(|| black_box(&a).matmul_transpose_b(black_box(&bm)).unwrap())
    });
}

criterion_group!(kernels, bench_svd, bench_matmul);
criterion_main!(kernels);
