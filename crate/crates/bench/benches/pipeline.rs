use criterion::{criterion_group, criterion_main, Criterion};
use fpfl_core::minutiae_map::{encode_map, MapConfig};
use fpfl_core::net::{extract_embedding, loss_and_grad, Dropout, NetConfig, NetParams, TrainBatch};
use fpfl_core::spatial_transform::{align, clamp_params, grid_sample_backward};
use fpfl_core::synth::{gen_identity, render_impression, SynthConfig};
use fpfl_core::GrayImage;
use std::hint::black_box;

fn minutiae_map(c: &mut Criterion) {
    let id = gen_identity(1, &SynthConfig::with_size(448)).unwrap();
    let t = &id.master_minutiae;
    let fast = MapConfig::default();
    let full = fast.exhaustive();
    let mut group = c.benchmark_group("encode_map_128x128x6");
    group.bench_function("truncated", |b| b.iter(|| encode_map(black_box(t), &fast).unwrap()));
    group.sample_size(10);
    group.bench_function("exhaustive", |b| b.iter(|| encode_map(black_box(t), &full).unwrap()));
    group.finish();
}

fn sampler(c: &mut Criterion) {
    let img = GrayImage::from_fn(448, 448, |y, x| (((x * 7 + y * 3) % 17) as f32) / 16.0);
    let p = clamp_params(12.0, -30.0, 0.3).unwrap();
    let grad = GrayImage::from_fn(448, 448, |y, x| ((x + y) % 3) as f32 - 1.0);
    c.bench_function("align_448", |b| b.iter(|| align(black_box(&img), &p, 448, 448).unwrap()));
    c.bench_function("align_backward_448", |b| b.iter(|| grid_sample_backward(black_box(&img), &p, &grad)));
}

fn network(c: &mut Criterion) {
    let cfg = NetConfig {
        num_classes: 20,
        ..Default::default()
    };
    let params = NetParams::init(&cfg).unwrap();
    let synth = SynthConfig::with_size(64);
    let id = gen_identity(2, &synth).unwrap();
    let imps: Vec<_> = (0..10).map(|s| render_impression(&id, s, &synth).unwrap()).collect();
    let batch = TrainBatch::new(
        imps.iter().map(|i| i.image.clone()).collect(),
        vec![0; imps.len()],
        imps.iter().map(|i| encode_map(&i.minutiae, &cfg.map_config()).unwrap()).collect(),
    )
    .unwrap();
    c.bench_function("extract_embedding_64", |b| {
        b.iter(|| extract_embedding(&params, black_box(&imps[0].image)).unwrap())
    });
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("loss_and_grad_batch10", |b| {
        b.iter(|| loss_and_grad(&params, black_box(&batch), Dropout::Seeded(1)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, minutiae_map, sampler, network);
criterion_main!(benches);
