//! Sequential vs rayon-parallel per-sample work on one batch.
//!
//! `cargo bench -p adavit` compares both paths; with
//! `--no-default-features` the "parallel" variant falls back to the
//! sequential loop, which makes the overhead of the fan-out visible.

use std::hint::black_box;

use adavit::exec::Exec;
use adavit::harness::{generate_synthetic, SyntheticTaskSpec};
use adavit::model::{Model, ModelConfig, Trainable};
use adavit::objectives::{evaluate, train_step, AdamW, BudgetConfig, EvalGates, GateMode, StepContext, TrainConfig, TrainSpec};
use adavit::policy::HeadSelectionMode;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BATCH: usize = 64;

fn setup() -> (Model<f32>, adavit::harness::Dataset) {
    let config = ModelConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        embed_dim: 32,
        num_heads: 4,
        num_blocks: 4,
        ffn_multiplier: 2,
        num_classes: 4,
    };
    let spec: SyntheticTaskSpec = serde_json::from_value(serde_json::json!({
        "image_size": 16, "glyph_size": 4, "num_classes": 4, "samples": BATCH
    }))
    .unwrap();
    let data = generate_synthetic(&spec, 1).unwrap();
    (Model::init(&config, &mut ChaCha8Rng::seed_from_u64(0)), data)
}

fn executors() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::sequential()), ("parallel", Exec::new(0))]
}

fn bench_train_step(c: &mut Criterion) {
    let (model, data) = setup();
    let train = TrainConfig::new(1, BATCH);
    let budget = BudgetConfig::uniform(0.5);
    let spec = TrainSpec {
        train: &train,
        budget: &budget,
        head_mode: HeadSelectionMode::Full,
        gates: GateMode::Learned,
        trainable: Trainable::All,
        seed: 0,
    };
    let batch: Vec<usize> = (0..BATCH).collect();
    let ctx = StepContext {
        epoch: 0,
        step: 0,
        lr: 1e-4,
        tau: 5.0,
        open: false,
    };
    let mut group = c.benchmark_group("train_step");
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::new(name, exec.threads()), |b| {
            let mut m = model.clone();
            let mut opt = AdamW::new(&m, train.weight_decay);
            b.iter(|| black_box(train_step(&mut m, &mut opt, &data, &batch, &spec, ctx, &exec).unwrap()));
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let (model, data) = setup();
    let mut group = c.benchmark_group("evaluate");
    for (name, exec) in executors() {
        group.bench_function(BenchmarkId::new(name, exec.threads()), |b| {
            b.iter(|| black_box(evaluate(&model, &data, EvalGates::Learned, HeadSelectionMode::Full, &exec).unwrap()));
        });
    }
    group.finish();
}

criterion_group!(benches, bench_train_step, bench_evaluate);
criterion_main!(benches);
