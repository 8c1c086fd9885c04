//! One training batch of per-sample forward/backward passes, fanned out
//! across threads versus run in a loop.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use simplr::data::{generate_scenes, scene_targets, SceneConfig, SceneRecord};
use simplr::model::{Model, ModelConfig};
use simplr::parallel::{map_indexed, map_indexed_sequential};
use simplr::Tape;

fn sample(model: &Model, scene: &SceneRecord) -> f64 {
    let targets = scene_targets(scene, model.config.task, model.config.mask_side()).unwrap();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &scene.image).unwrap();
    let (loss, report) = model.loss(&mut tape, &out, &targets).unwrap();
    let grads = tape
        .backward(loss)
        .unwrap()
        .into_param_grads(model.store.len());
    report.total + grads.len() as f64
}

fn batch(c: &mut Criterion) {
    let model = Model::new(ModelConfig::femto(), 0).unwrap();
    let scenes = generate_scenes(&(0..8).collect::<Vec<_>>(), &SceneConfig::default()).unwrap();
    let mut group = c.benchmark_group("batch_forward_backward");
    group.sample_size(10);
    for b in [1, 4, 8] {
        group.bench_with_input(BenchmarkId::new("parallel", b), &b, |bench, &b| {
            bench.iter(|| black_box(map_indexed(b, |i| sample(&model, &scenes[i]))))
        });
        group.bench_with_input(BenchmarkId::new("sequential", b), &b, |bench, &b| {
            bench.iter(|| black_box(map_indexed_sequential(b, |i| sample(&model, &scenes[i]))))
        });
    }
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
