//! Sequential vs data-parallel throughput on the hot paths: the matmul
//! kernel, batch evaluation, and one training step. Both paths produce
//! bit-identical results; only wall-clock time differs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use mimo_jscc::channel::SvdMode;
use mimo_jscc::datasets::{synthetic_set, SyntheticKind};
use mimo_jscc::harness::{evaluate_samples, EvalSettings};
use mimo_jscc::numerics::{AdamState, Graph};
use mimo_jscc::par::ExecMode;
use mimo_jscc::rng::stream;
use mimo_jscc::trainer::{train_step, Ratio, SnrStrategy, TrainConfig};
use mimo_jscc::vitcodec::{AttnScale, ViTConfig, ViTParams};
use rand::Rng;

const MODES: [(&str, ExecMode); 2] = [("seq", ExecMode::Sequential), ("par", ExecMode::Parallel)];

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul_256");
    let n = 256;
    let mut rng = stream(1, &[1]);
    let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for (label, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(label), &mode, |bench, &mode| {
            bench.iter(|| {
                let mut g = Graph::new(mode);
                let av = g.leaf_data(n, n, a.clone(), false);
                let bv = g.leaf_data(n, n, b.clone(), false);
                let cv = g.matmul(av, bv).unwrap();
                std::hint::black_box(g.value(cv)[0])
            });
        });
    }
    group.finish();
}

fn eval_fixture() -> (ViTConfig, ViTParams, mimo_jscc::datasets::ImageSet) {
    let vit = ViTConfig::new(4, 64, 2, 4, 2, 16, 16, 16, AttnScale::ModelDim).unwrap();
    let params = ViTParams::init(&vit, 3);
    let images = synthetic_set(SyntheticKind::Gradients, 16, 16, 16, 5);
    (vit, params, images)
}

fn bench_evaluate(c: &mut Criterion) {
    let mut group = c.benchmark_group("evaluate_16_images");
    group.sample_size(10);
    let (vit, params, images) = eval_fixture();
    for (label, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(label), &mode, |bench, &mode| {
            let mut set = EvalSettings::new(10.0, 7);
            set.exec = mode;
            bench.iter(|| evaluate_samples(&params, &vit, &images, &set).unwrap());
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step_batch8");
    group.sample_size(10);
    let (vit, params, images) = eval_fixture();
    for (label, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(label), &mode, |bench, &mode| {
            let cfg = TrainConfig {
                vit: vit.clone(),
                ratio: Ratio::new(1, 48).unwrap(),
                snr: SnrStrategy::Uniform(0.0, 22.0),
                svd_mode: SvdMode::With,
                batch_size: 8,
                lr: 1e-3,
                steps: 1,
                seed: 11,
                ps: 1.0,
                sigma_h2: 1.0,
                sing_floor: 1e-6,
                eval_every: 0,
                grad_clip: None,
                checkpoint_path: None,
                exec: mode,
            };
            let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.numel()).collect();
            bench.iter(|| {
                let mut p = params.clone();
                let mut opt = AdamState::new(cfg.lr, &sizes);
                train_step(&mut p, &mut opt, &cfg, &images, 0).unwrap()
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_evaluate, bench_train_step);
criterion_main!(benches);
