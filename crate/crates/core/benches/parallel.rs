//! Rayon pool versus a single worker on the data-parallel hot paths.
//!
//! Build with `--no-default-features` to measure the plain sequential
//! fallback; both groups then run the same code.

use std::hint::black_box;

use bavt::experiment::predict_all;
use bavt::imgproc::{AugmentConfig, ImageGrid, MaskGrid};
use bavt::phantom::{make_dataset, PhantomConfig};
use bavt::sdt::signed_distance_map;
use bavt::train::{Dataset, LossConfig, Sample, TrainConfig, Trainer};
use bavt::vit::{ModelParams, ViTConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::{ThreadPool, ThreadPoolBuilder};

fn pools() -> Vec<(&'static str, ThreadPool)> {
    let all = ThreadPoolBuilder::new().build().unwrap();
    let one = ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    vec![("rayon", all), ("sequential", one)]
}

fn phantoms(n: usize, size: usize) -> Vec<(ImageGrid, MaskGrid)> {
    let cfg = PhantomConfig { size, ..PhantomConfig::default() };
    let ds = make_dataset(n, &cfg, 0.34, 3).unwrap();
    ds.samples.into_iter().map(|s| (s.image, s.mask)).collect()
}

fn edt(c: &mut Criterion) {
    let (_, mask) = phantoms(3, 512).swap_remove(0);
    let mut g = c.benchmark_group("signed_distance_map_512");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| signed_distance_map(black_box(&mask)).unwrap()))
        });
    }
    g.finish();
}

fn phantom_generation(c: &mut Criterion) {
    let cfg = PhantomConfig { size: 64, ..PhantomConfig::default() };
    let mut g = c.benchmark_group("make_dataset_32x64");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| make_dataset(32, black_box(&cfg), 0.776, 0).unwrap()))
        });
    }
    g.finish();
}

fn batch_gradients(c: &mut Criterion) {
    let to_samples = |v: Vec<(ImageGrid, MaskGrid)>| v.into_iter().map(|(image, mask)| Sample { image, mask }).collect();
    let data = Dataset { train: to_samples(phantoms(8, 64)), val: to_samples(phantoms(3, 64)) };
    let vit = ViTConfig { image_size: 64, ..ViTConfig::tiny() };
    let train = TrainConfig { batch_size: 8, ..TrainConfig::default() };
    let trainer = Trainer::new(&data, vit, train, LossConfig::default(), AugmentConfig::default()).unwrap();
    let batch: Vec<usize> = (0..8).collect();
    let mut g = c.benchmark_group("batch_gradients_8x64");
    g.sample_size(20);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| trainer.batch_gradients(0, black_box(&batch)).unwrap()))
        });
    }
    g.finish();
}

fn inference(c: &mut Criterion) {
    let images: Vec<ImageGrid> = phantoms(8, 64).into_iter().map(|(i, _)| i).collect();
    let vit = ViTConfig { image_size: 64, ..ViTConfig::tiny() };
    let params = ModelParams::init(&vit, 0).unwrap();
    let augment = AugmentConfig::default();
    let mut g = c.benchmark_group("predict_all_8x64");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| predict_all(black_box(&images), &params, &vit, &augment).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, edt, phantom_generation, batch_gradients, inference);
criterion_main!(benches);
