use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sesn::conv::conv2d_grouped;
use sesn::{conv2d, conv_h_h, conv_t_h, BasisSpec, ChannelLayout, FeatureMapH, Padding, ScaleConvLayer, ScaleGrid, SteerableBasis, Tensor};

const BATCH: usize = 8;
const CHANNELS: usize = 16;
const SIZE: usize = 28;

fn basis(levels: usize) -> Arc<SteerableBasis> {
    let spec = BasisSpec { num_functions: 10, filter_size: 7, scale_grid: ScaleGrid::new(sesn::DEFAULT_BASE, levels).unwrap(), sigma0: 1.5, max_order: 3 };
    Arc::new(SteerableBasis::build(spec).unwrap())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn lifting(c: &mut Criterion) {
    let mut group = c.benchmark_group("lifting");
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&mut rng, &[BATCH, CHANNELS, SIZE, SIZE]);
    for levels in [1, 4] {
        let layer = ScaleConvLayer::<f32>::random(CHANNELS, CHANNELS, 1, basis(levels), true, Padding::Zero, &mut rng).unwrap();
        let plain = random(&mut rng, &[CHANNELS * levels, CHANNELS, 7, 7]);
        group.bench_with_input(BenchmarkId::new("conv_t_h", levels), &levels, |b, _| b.iter(|| conv_t_h(black_box(&x), &layer).unwrap()));
        group.bench_with_input(BenchmarkId::new("conv2d", levels), &levels, |b, _| b.iter(|| conv2d(black_box(&x), &plain, Padding::Zero).unwrap()));
    }
    group.finish();
}

fn group_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("h_to_h");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let levels = 4;
    let b4 = basis(levels);
    let h = FeatureMapH::new(random(&mut rng, &[BATCH, CHANNELS, levels, SIZE, SIZE]), b4.spec().scale_grid.clone()).unwrap();
    let flat = h.data().clone().reshape(&[BATCH, CHANNELS * levels, SIZE, SIZE]).unwrap();
    let grouped = random(&mut rng, &[levels, CHANNELS, CHANNELS, 7, 7]);
    group.bench_function("grouped_conv2d", |b| b.iter(|| conv2d_grouped(black_box(&flat), &grouped, ChannelLayout::Interleaved, Padding::Zero).unwrap()));
    for k_s in [1, 2, 3] {
        let layer = ScaleConvLayer::<f32>::random(CHANNELS, CHANNELS, k_s, b4.clone(), true, Padding::Zero, &mut rng).unwrap();
        group.bench_with_input(BenchmarkId::new("conv_h_h", k_s), &k_s, |b, _| b.iter(|| conv_h_h(black_box(&h), &layer).unwrap()));
    }
    group.finish();
}

fn basis_build(c: &mut Criterion) {
    c.bench_function("basis_build_4x10x7x7", |b| b.iter(|| basis(black_box(4))));
}

criterion_group!(benches, lifting, group_conv, basis_build);
criterion_main!(benches);
