use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use fedcap_bench::two_groups;
use fedcap_core::cluster::{cluster_similarity, rbf_similarity_real, symmetric_eig, SpectralParams};
use fedcap_core::rng::seeded;

fn spectral(c: &mut Criterion) {
    let mut group = c.benchmark_group("spectral_cluster");
    for n in [20usize, 50, 100] {
        let points = two_groups(n, 64, n as u64);
        let params = SpectralParams::new(5, 0.5);
        group.bench_with_input(BenchmarkId::from_parameter(n), &points, |b, points| {
            b.iter(|| {
                let s = rbf_similarity_real(points, &params).unwrap();
                cluster_similarity(s, &params, 1, &mut seeded(0)).unwrap()
            })
        });
    }
    group.finish();
}

fn jacobi(c: &mut Criterion) {
    let points = two_groups(50, 8, 3);
    let s = rbf_similarity_real(&points, &SpectralParams::new(2, 0.5)).unwrap();
    c.bench_function("symmetric_eig_50", |b| b.iter(|| symmetric_eig(black_box(s.matrix())).unwrap()));
}

criterion_group!(benches, spectral, jacobi);
criterion_main!(benches);
