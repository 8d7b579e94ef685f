use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ravnest::clusterform::{evolve, GaParams};
use ravnest_bench::{footprint, random_pool};

fn ga(c: &mut Criterion) {
    let mut group = c.benchmark_group("evolve");
    group.sample_size(10);
    let fp = footprint();
    for n in [10, 40] {
        let pool = random_pool(n as u64, n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &pool, |b, pool| {
            b.iter(|| evolve(pool, &fp, 3, &GaParams::default()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, ga);
criterion_main!(benches);
