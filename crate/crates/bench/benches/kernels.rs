use std::hint::black_box;

use blindguard_core::attacks::{lspga, AttackConfig, AttackMode, Mask};
use blindguard_core::autodiff::kernels::gemm;
use blindguard_core::autodiff::{Graph, Padding};
use blindguard_core::model::{Architecture, Model};
use blindguard_core::preprocess::{Encoding, Pipeline};
use blindguard_core::train::parameter_gradients;
use blindguard_core::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn images(n: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[n, 1, 28, 28], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [64usize, 256] {
        let a = vec![0.5; n * n];
        let b = vec![0.25; n * n];
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm(n, n, n, 1.0, black_box(&a), false, black_box(&b), false, 0.0, &mut out))
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::uniform(&[16, 15, 28, 28], 0.0, 1.0, &mut rng);
    let k = Tensor::uniform(&[32, 15, 3, 3], -0.1, 0.1, &mut rng);
    c.bench_function("conv2d 16x15x28x28 -> 32, fwd+bwd", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let kv = g.param(k.clone());
            let y = g.conv2d(xv, kv, Padding::Same).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(kv).is_some())
        })
    });
}

fn bench_pipeline(c: &mut Criterion) {
    let batch = images(100, 2);
    let p = Pipeline::canonical(15).unwrap();
    c.bench_function("canonical pipeline, 100 images", |b| {
        b.iter(|| p.apply(black_box(&batch)).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let batch = images(100, 3);
    let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
    let input = Pipeline::thermometer(15).unwrap().apply(&batch).unwrap().data;
    let model = Model::build(Architecture::mnist(15), 0).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("gradients, 100 encoded images", |b| {
        b.iter(|| parameter_gradients(&model, black_box(&input), &labels).unwrap())
    });
    group.finish();
}

fn bench_lspga(c: &mut Criterion) {
    let batch = images(20, 4);
    let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
    let p = Pipeline::thermometer(15).unwrap();
    let mask = Mask::from_range(&p.bucket_range(&batch, 0.3).unwrap()).unwrap();
    let model = Model::build(Architecture::mnist(15), 0).unwrap();
    let cfg = AttackConfig {
        epsilon: 0.3,
        steps: 1,
        mode: AttackMode::FullWhiteBox,
        ..AttackConfig::default()
    };
    let mut group = c.benchmark_group("lspga");
    group.sample_size(10);
    group.bench_function("one step, 20 images", |b| {
        b.iter(|| lspga(&model, Encoding::Thermometer, &mask, &labels, &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_gemm,
    bench_conv,
    bench_pipeline,
    bench_train_step,
    bench_lspga
);
criterion_main!(benches);
