use std::hint::black_box;

use canseg_core::kernels::conv::{conv2d_forward, ConvSpec};
use canseg_core::kernels::matmul;
use canseg_core::model::{CanModel, ModelConfig, ReducedGlobalAttention};
use canseg_core::nn::{Forward, Init, ParamStore};
use canseg_core::{Graph, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ramp(shape: [usize; 4]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|i| ((i * 31 % 97) as f32 - 48.0) / 97.0).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = ramp([1, 64, 64, 128]);
    let dense = ramp([64, 64, 3, 3]);
    let depthwise = ramp([64, 1, 3, 3]);
    let pointwise = ramp([128, 64, 1, 1]);
    c.bench_function("conv3x3_64ch_64x128", |b| {
        b.iter(|| conv2d_forward(black_box(&x), &dense, None, &ConvSpec::same(3, 1, 1)).unwrap())
    });
    c.bench_function("depthwise3x3_64ch_64x128", |b| {
        b.iter(|| conv2d_forward(black_box(&x), &depthwise, None, &ConvSpec::same(3, 1, 64)).unwrap())
    });
    c.bench_function("pointwise_64to128_64x128", |b| {
        b.iter(|| conv2d_forward(black_box(&x), &pointwise, None, &ConvSpec::same(1, 1, 1)).unwrap())
    });
}

fn gemm(c: &mut Criterion) {
    let q = ramp([1, 1, 2048, 32]);
    let k = ramp([1, 1, 32, 110]);
    c.bench_function("matmul_2048x32x110", |b| b.iter(|| matmul(black_box(&q), &k).unwrap()));
}

fn attention(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ga = ReducedGlobalAttention::build(&mut Init::new(&mut store, &mut rng), "ga", 96, &cfg).unwrap();
    let x = ramp([1, 96, 32, 64]);
    c.bench_function("reduced_attention_96ch_32x64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let mut fw = Forward::new(&mut g, &store, false, false);
            let xv = fw.input(x.clone());
            let y = ga.forward(&mut fw, xv).unwrap();
            black_box(g.shape(y));
        })
    });
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    let toy = CanModel::new(ModelConfig::toy(), 0).unwrap();
    let small = Tensor::full([1, 3, 64, 64], 0.5f32);
    group.bench_function("toy_infer_64x64", |b| b.iter(|| toy.infer(black_box(&small)).unwrap()));
    let default = CanModel::new(ModelConfig::default(), 0).unwrap();
    let mid = Tensor::full([1, 3, 256, 512], 0.5f32);
    group.bench_function("default_infer_256x512", |b| {
        b.iter(|| default.infer(black_box(&mid)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, conv, gemm, attention, network);
criterion_main!(benches);
