use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use midfsl::geometry::split_reconstruct;
use midfsl::PrototypeBank;
use midfsl_bench::random_rows;

fn reconstruct(c: &mut Criterion) {
    let mut group = c.benchmark_group("split_reconstruct");
    for (classes, dim, splits) in [(64, 128, 4), (64, 640, 4), (351, 640, 8)] {
        let bank = PrototypeBank::from_rows(&random_rows(classes, dim, 1)).unwrap();
        let f = random_rows(1, dim, 2).remove(0);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("N{classes}_d{dim}_S{splits}")),
            &(),
            |b, _| b.iter(|| split_reconstruct(black_box(&f), &bank, Some(0), splits, 3).unwrap()),
        );
    }
    group.finish();
}

criterion_group!(benches, reconstruct);
criterion_main!(benches);
