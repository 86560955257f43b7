//! Data-parallel paths under a one-thread pool versus the default pool.
//! Built without the `parallel` feature, only the sequential variant runs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lesionseg::config::TrainConfig;
use lesionseg::dataset::make_synthetic_dataset;
use lesionseg::evaluator::{evaluate, EvalOptions};
use lesionseg::features::MemoryBank;
use lesionseg::morphology::compose_contours;
use lesionseg::nn::{BackboneDescriptor, UNet};
use lesionseg::patching::partition;
use lesionseg::trainer::{compute_gradients, LossWeights};

fn pools() -> Vec<(String, Option<rayon::ThreadPool>)> {
    let mut v = vec![(
        "1-thread".to_string(),
        Some(rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    )];
    if lesionseg::par::is_parallel() {
        v.push((format!("default-{}", rayon::current_num_threads()), None));
    }
    v
}

fn run<R: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> R + Send) -> R {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

fn bench_contours(c: &mut Criterion) {
    let samples = make_synthetic_dataset(4, 256, 1).unwrap();
    let mut group = c.benchmark_group("compose_contours_256");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| {
                run(&pool, || {
                    for s in &samples {
                        let grid = partition(&s.mask, 16).unwrap();
                        std::hint::black_box(compose_contours(&grid, &s.mask).unwrap());
                    }
                })
            })
        });
    }
    group.finish();
}

fn bench_train_gradients(c: &mut Criterion) {
    let batch = make_synthetic_dataset(4, 64, 2).unwrap();
    let config = TrainConfig {
        input_size: 64,
        grid_n: 8,
        backbone: BackboneDescriptor {
            in_channels: 3,
            widths: vec![8, 16, 32],
        },
        ..TrainConfig::default()
    };
    let model = UNet::new(config.backbone.clone(), 0).unwrap();
    let bank = MemoryBank::new(config.bank_capacity);
    let mut group = c.benchmark_group("train_gradients_4x64");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| {
                run(&pool, || {
                    compute_gradients(&model, &batch, &bank, &config, LossWeights::from_config(&config), 0).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let samples = make_synthetic_dataset(8, 64, 3).unwrap();
    let model = UNet::new(
        BackboneDescriptor {
            in_channels: 3,
            widths: vec![8, 16, 32],
        },
        0,
    )
    .unwrap();
    let mut group = c.benchmark_group("evaluate_8x64");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(&name), |b| {
            b.iter(|| run(&pool, || evaluate(&model, &samples, &EvalOptions::default()).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_contours, bench_train_gradients, bench_evaluate);
criterion_main!(benches);
