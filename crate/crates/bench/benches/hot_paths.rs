use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lsseg_core::chan_vese::{cv_segment, CvParams, LevelSetField};
use lsseg_core::data_synth::{generate_scene, SceneSpec};
use lsseg_core::ls_loss::{combined_loss, LossWeights};
use lsseg_core::tinynet::{NetConfig, TinyNet};

fn bench(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let scene = generate_scene(&spec, 0).unwrap();
    let net = TinyNet::new(NetConfig::new(1, spec.num_classes), 0).unwrap();
    let pass = net.forward(&scene.image).unwrap();
    let weights = LossWeights::default();

    c.bench_function("combined_loss_64x64_k4", |b| {
        b.iter(|| combined_loss(black_box(&pass.probs), &scene.labels, &weights).unwrap())
    });
    c.bench_function("forward_64x64", |b| b.iter(|| net.forward(black_box(&scene.image)).unwrap()));
    let grad = combined_loss(&pass.probs, &scene.labels, &weights).unwrap().logit_grad;
    c.bench_function("backward_64x64", |b| {
        b.iter(|| net.backward(&pass.cache, black_box(&grad)).unwrap())
    });
    let init = LevelSetField::random_binary(64, 64, 1).unwrap();
    c.bench_function("cv_segment_64x64", |b| {
        b.iter(|| cv_segment(black_box(&scene.image), &CvParams::default(), &init).unwrap())
    });
}

criterion_group!(benches, bench);
criterion_main!(benches);
