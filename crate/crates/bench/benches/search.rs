use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use fpfl_bench::{random_gallery, random_queries};
use fpfl_core::match_score;
use std::hint::black_box;

const DIM: usize = 512;

fn pairwise(c: &mut Criterion) {
    let q = random_queries(2, DIM, 1);
    c.bench_function("match_score/512", |b| b.iter(|| match_score(black_box(&q[0]), black_box(&q[1]))));
}

fn exhaustive(c: &mut Criterion) {
    let mut group = c.benchmark_group("search_top10");
    group.sample_size(20);
    let probe = random_queries(1, DIM, 2).remove(0);
    for n in [10_000usize, 20_000, 40_000] {
        let gallery = random_gallery(n, DIM, 3);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("serial", n), &gallery, |b, g| {
            b.iter(|| g.search(black_box(&probe), 10).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("parallel", n), &gallery, |b, g| {
            b.iter(|| g.search_par(black_box(&probe), 10).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, pairwise, exhaustive);
criterion_main!(benches);
