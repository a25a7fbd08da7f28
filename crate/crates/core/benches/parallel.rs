//! Parallel vs sequential execution of the batch entry points.
//!
//! Without the `parallel` feature both modes run sequentially, which makes the
//! sequential fallback directly comparable: `cargo bench --no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sfa_core::attack::{attack_batch, AttackConfig};
use sfa_core::dataset::{generate_dataset, DatasetConfig};
use sfa_core::detector::{Detector, DetectorConfig, PostprocessConfig, TrainConfig};
use sfa_core::eval::detect_all;
use sfa_core::tensor::Tensor;

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn bench_detect(c: &mut Criterion) {
    let scenes = generate_dataset(&DatasetConfig { seed: 9, n_scenes: 16, ..DatasetConfig::default() }).unwrap();
    let det = Detector::new(DetectorConfig::default()).unwrap();
    let images: Vec<&Tensor> = scenes.iter().map(|s| s.image.tensor()).collect();
    let pp = PostprocessConfig::default();
    let mut g = c.benchmark_group("detect_16_images");
    for (name, parallel) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| detect_all(&det, &images, &pp, parallel).unwrap())
        });
    }
    g.finish();
}

fn bench_attack(c: &mut Criterion) {
    let scenes = generate_dataset(&DatasetConfig { seed: 9, n_scenes: 4, ..DatasetConfig::default() }).unwrap();
    let det = Detector::new(DetectorConfig::default()).unwrap();
    let cfg = AttackConfig { iterations: 5, ..AttackConfig::default() };
    let mut g = c.benchmark_group("attack_4_scenes_5_iterations");
    g.sample_size(10);
    for (name, parallel) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| attack_batch(&det, &scenes, &cfg, parallel))
        });
    }
    g.finish();
}

fn bench_train(c: &mut Criterion) {
    let scenes = generate_dataset(&DatasetConfig { seed: 9, n_scenes: 32, ..DatasetConfig::default() }).unwrap();
    let mut g = c.benchmark_group("train_epoch_32_scenes");
    g.sample_size(10);
    for (name, parallel) in modes() {
        let cfg = TrainConfig { epochs: 1, parallel, ..TrainConfig::default() };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut det = Detector::new(DetectorConfig::default()).unwrap();
                det.train(&scenes, &[], &cfg).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench_detect, bench_attack, bench_train);
criterion_main!(benches);
