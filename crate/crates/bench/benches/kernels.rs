use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lapseg_bench::probe;
use lapseg_core::nn::{conv2d, conv_transpose2d, ConvGeometry};
use lapseg_core::{Shape, Tape, Tensor};

/// (input channels, output channels, input side) of a few network layers.
const LAYERS: [(usize, usize, usize); 3] = [(3, 64, 224), (128, 256, 56), (512, 1024, 14)];

fn conv(c: &mut Criterion) {
    let g = ConvGeometry::new(4, 2, 1);
    let mut group = c.benchmark_group("conv2d");
    group.sample_size(10);
    for (ci, co, s) in LAYERS {
        let x: Tensor<f32> = probe([1, ci, s, s], 1);
        let w: Tensor<f32> = probe([co, ci, 4, 4], 2);
        let b: Tensor<f32> = probe(Shape::vector(co), 3);
        let id = format!("{ci}x{s}->{co}");
        group.bench_function(BenchmarkId::new("forward", &id), |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (xv, wv, bv) = (t.constant(&x), t.constant(&w), t.constant(&b));
                conv2d(&mut t, xv, wv, bv, g).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("forward+backward", &id), |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (xv, wv, bv) = (t.leaf(&x), t.leaf(&w), t.leaf(&b));
                let y = conv2d(&mut t, xv, wv, bv, g).unwrap();
                let l = t.sum(y);
                t.backward(l).unwrap()
            })
        });
    }
    group.finish();
}

fn conv_transpose(c: &mut Criterion) {
    let g = ConvGeometry::new(4, 2, 1);
    let mut group = c.benchmark_group("conv_transpose2d");
    group.sample_size(10);
    for (co, ci, s) in LAYERS {
        // the decoder mirror of each encoder layer: half the side in, ci -> co
        let s = s / 2;
        let x: Tensor<f32> = probe([1, ci, s, s], 4);
        let w: Tensor<f32> = probe([ci, co, 4, 4], 5);
        let b: Tensor<f32> = probe(Shape::vector(co), 6);
        let id = format!("{ci}x{s}->{co}");
        group.bench_function(BenchmarkId::new("forward+backward", &id), |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (xv, wv, bv) = (t.leaf(&x), t.leaf(&w), t.leaf(&b));
                let y = conv_transpose2d(&mut t, xv, wv, bv, g).unwrap();
                let l = t.sum(y);
                t.backward(l).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, conv_transpose);
criterion_main!(benches);
