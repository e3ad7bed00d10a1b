use aide_bench::noise_image;
use aide_core::model::init_checkpoint;
use aide_core::AideConfig;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn scoring(c: &mut Criterion) {
    let ckpt = init_checkpoint(&AideConfig::default(), None).unwrap();
    let img = noise_image(256, 256, 8);
    let mut group = c.benchmark_group("score");
    group.sample_size(10);
    group.bench_function("default_config_256px", |b| {
        b.iter(|| ckpt.score(black_box(&img), "bench", None).unwrap())
    });
    group.finish();
}

criterion_group!(benches, scoring);
criterion_main!(benches);
