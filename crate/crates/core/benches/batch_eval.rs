//! Sequential versus data-parallel execution of the batch workloads.
//!
//! Build with `--no-default-features` to see the sequential fallback for
//! both arms.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use liveness_core::datagen::{center_crop, gen_benchmark, DomainSpec, gen_domain};
use liveness_core::harness::score_images;
use liveness_core::losses::LossConfig;
use liveness_core::metrics::{roc_auc, ScoredSample};
use liveness_core::model::{LivenessModel, ModelConfig};
use liveness_core::parallel::Exec;
use liveness_core::pdle::{encode_batch, ClassPool, PdleConfig};
use liveness_core::rng::stream;
use liveness_core::{Label, LabeledImage};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn model(domains: usize) -> LivenessModel {
    let cfg = ModelConfig {
        domains,
        encoder_widths: vec![8, 16, 32],
        input_size: (56, 56),
        ..ModelConfig::default()
    };
    LivenessModel::init(cfg, 3).expect("valid model")
}

fn cropped(images: &[LabeledImage]) -> Vec<LabeledImage> {
    images
        .iter()
        .map(|img| LabeledImage {
            image: center_crop(&img.image, (56, 56)).expect("64px source"),
            ..img.clone()
        })
        .collect()
}

fn bench_loss_and_grad(c: &mut Criterion) {
    let images = cropped(&gen_benchmark(2, 16, (64, 64), 1, Exec::Parallel).unwrap());
    let pool = ClassPool::new(&images);
    let pdle = PdleConfig::default();
    let batch = encode_batch(&images, &pool, &pdle, &mut stream(1, &[0])).unwrap();
    let m = model(2);
    let loss = LossConfig::default();

    let mut group = c.benchmark_group("loss_and_grad");
    group.sample_size(10);
    group.throughput(Throughput::Elements(batch.len() as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, batch.len()), &exec, |b, &exec| {
            b.iter(|| m.loss_and_grad(black_box(&batch), &loss, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let images = gen_benchmark(1, 64, (64, 64), 2, Exec::Parallel).unwrap();
    let m = model(0);
    let mut group = c.benchmark_group("score_images");
    group.sample_size(10);
    group.throughput(Throughput::Elements(images.len() as u64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, images.len()), &exec, |b, &exec| {
            b.iter(|| score_images(&m, black_box(&images), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_generation(c: &mut Criterion) {
    let spec = DomainSpec::preset(0, 64, 64).unwrap();
    let mut group = c.benchmark_group("gen_domain");
    group.sample_size(10);
    group.throughput(Throughput::Elements(64));
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, 64), &exec, |b, &exec| {
            b.iter(|| gen_domain(black_box(&spec), 32, 9, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = stream(4, &[]);
    let samples: Vec<ScoredSample> = (0..20_000)
        .map(|i| {
            use rand::Rng;
            let label = if i % 2 == 0 { Label::Real } else { Label::Spoof };
            ScoredSample::new(rng.random(), label, 0)
        })
        .collect();
    c.bench_function("roc_auc/20000", |b| b.iter(|| roc_auc(black_box(&samples)).unwrap()));
}

criterion_group!(benches, bench_loss_and_grad, bench_scoring, bench_generation, bench_metrics);
criterion_main!(benches);
