use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lapseg_bench::probe;
use lapseg_core::data::{one_hot, LabelMap, Taxonomy};
use lapseg_core::model::{Model, ModelConfig};
use lapseg_core::optim::{AdamConfig, AdamState};
use lapseg_core::train::{TrainOptions, Trainer};
use lapseg_core::Tensor;

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("infer");
    group.sample_size(10);
    let mut model = Model::<f32>::build(ModelConfig::segmentation(9)).unwrap();
    for side in [64, 224] {
        let x: Tensor<f32> = probe([1, 3, side, side], 7);
        group.bench_function(BenchmarkId::from_parameter(side), |b| b.iter(|| model.infer(&x).unwrap()));
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for side in [64, 224] {
        let model = Model::<f32>::build(ModelConfig::segmentation(9)).unwrap();
        let mut trainer = Trainer::new(model, AdamState::new(AdamConfig::default()), TrainOptions::default()).unwrap();
        let x: Tensor<f32> = probe([2, 3, side, side], 8);
        let maps: Vec<LabelMap> = (0..2)
            .map(|n| {
                let labels = (0..side * side).map(|p| ((p / side + n) % 9) as u8).collect();
                LabelMap::new(side, side, Taxonomy::Single9, labels).unwrap()
            })
            .collect();
        let y = one_hot(&maps, 9).unwrap();
        group.bench_function(BenchmarkId::new("batch2", side), |b| b.iter(|| trainer.train_step(&x, &y).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, inference, train_step);
criterion_main!(benches);
