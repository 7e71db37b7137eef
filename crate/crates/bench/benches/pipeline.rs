use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use phi_core::bench::phi_forward;
use phi_core::datagen::gen_carbyne_chain;
use phi_core::eigensolver::{lobpcg, LobpcgOptions};
use phi_core::molgraph::{build_radius_graph, build_weighted_laplacian};

const SIZES: [usize; 3] = [1_000, 4_000, 16_000];
const K: usize = 8;
const CUTOFF: f64 = 3.0;
const SPACING: f64 = 1.3;

fn opts() -> LobpcgOptions {
    LobpcgOptions { tol: 1e-8, max_iter: 50, seed: 0, ..Default::default() }
}

fn laplacian(c: &mut Criterion) {
    let mut group = c.benchmark_group("laplacian");
    for n in SIZES {
        let chain = gen_carbyne_chain(n, SPACING).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &chain, |b, chain| {
            b.iter(|| build_weighted_laplacian(&build_radius_graph(chain, CUTOFF, usize::MAX)).unwrap())
        });
    }
    group.finish();
}

fn eigensolve(c: &mut Criterion) {
    let mut group = c.benchmark_group("eigensolve");
    group.sample_size(10);
    for n in SIZES {
        let chain = gen_carbyne_chain(n, SPACING).unwrap();
        let l = build_weighted_laplacian(&build_radius_graph(&chain, CUTOFF, usize::MAX)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &l, |b, l| b.iter(|| lobpcg(l, K, &opts()).unwrap()));
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for n in SIZES {
        let chain = gen_carbyne_chain(n, SPACING).unwrap();
        let l = build_weighted_laplacian(&build_radius_graph(&chain, CUTOFF, usize::MAX)).unwrap();
        let basis = lobpcg(&l, K, &opts()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &(l, basis), |b, (l, basis)| {
            b.iter(|| phi_forward(l, basis, K, 16, 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, laplacian, eigensolve, forward);
criterion_main!(benches);
