use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use muralera_bench::{descriptors, gmm, histograms, test_gray};
use muralera_core::classification::{chi2_kernel, ova_train, Gamma};
use muralera_core::encoding::{fisher_vector, ifv_normalize, Posterior};
use muralera_core::shape_features::dense_sift;

fn bench_dense_sift(c: &mut Criterion) {
    let mut group = c.benchmark_group("dense_sift");
    group.sample_size(10);
    for side in [160, 400] {
        let gray = test_gray(side);
        group.bench_with_input(BenchmarkId::from_parameter(side), &gray, |b, g| b.iter(|| dense_sift(black_box(g), 4, 5)));
    }
    group.finish();
}

fn bench_fisher(c: &mut Criterion) {
    let mut group = c.benchmark_group("fisher_vector");
    group.sample_size(10);
    let desc = descriptors(2000, 128);
    for k in [16, 128] {
        let model = gmm(k, 128);
        group.bench_with_input(BenchmarkId::from_parameter(k), &model, |b, m| {
            b.iter(|| ifv_normalize(&fisher_vector(black_box(&desc), m, Posterior::Weighted).unwrap()))
        });
    }
    group.finish();
}

fn bench_kernel(c: &mut Criterion) {
    let mut group = c.benchmark_group("chi2_kernel");
    group.sample_size(10);
    for dim in [64, 512] {
        let h = histograms(300, dim);
        group.bench_with_input(BenchmarkId::from_parameter(dim), &h, |b, h| {
            b.iter(|| chi2_kernel(black_box(h.view()), h.view(), Gamma::Auto).unwrap())
        });
    }
    group.finish();
}

fn bench_svm(c: &mut Criterion) {
    let h = histograms(300, 64);
    let k = chi2_kernel(h.view(), h.view(), Gamma::Auto).unwrap();
    let labels: Vec<usize> = (0..300).map(|i| (i * 7 / 5) % 6).collect();
    let mut group = c.benchmark_group("ova_train");
    group.sample_size(10);
    group.bench_function("300x6", |b| b.iter(|| ova_train(black_box(&k), &labels, 6, 10.0).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_dense_sift, bench_fisher, bench_kernel, bench_svm);
criterion_main!(benches);
