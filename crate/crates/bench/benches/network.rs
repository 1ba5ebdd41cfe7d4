use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use midfsl::{BackboneConfig, Network};
use midfsl_bench::random_rows;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn forward(c: &mut Criterion) {
    let config = BackboneConfig {
        block_widths: vec![16, 32, 32, 64],
        input_shape: (32, 32, 1),
        tap_layers: vec![1, 2],
        norm_groups: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Network::new(config, 32, 10.0, &mut rng).unwrap();
    let images = random_rows(32, 32 * 32, 3);
    c.bench_function("forward_with_taps_batch32_32x32", |b| {
        b.iter(|| net.extract(black_box(&images), 32).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward
}
criterion_main!(benches);
