use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use ravnest::multiring::{build_ring_schedule_from_ranges, run_allreduce};
use ravnest_bench::{equal_layouts, random_params};

fn multi_vs_single(c: &mut Criterion) {
    let dims = 65_536;
    let mut group = c.benchmark_group("allreduce");
    group.throughput(Throughput::Elements(dims as u64));
    for clusters in [2, 4, 6] {
        let inputs = random_params(clusters as u64, clusters, dims);
        for (name, peers) in [("multi_ring", 4), ("single_ring", 1)] {
            let schedule = build_ring_schedule_from_ranges(&equal_layouts(clusters, peers, dims)).unwrap();
            group.bench_with_input(BenchmarkId::new(name, clusters), &inputs, |b, inputs| {
                b.iter(|| run_allreduce(&schedule, inputs).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, multi_vs_single);
criterion_main!(benches);
