//! Training-loop behavior on small synthetic problems.

use adavit::exec::Exec;
use adavit::harness::{generate_synthetic, Dataset, SyntheticTaskSpec};
use adavit::model::{Model, ModelConfig, Trainable};
use adavit::objectives::{
    train, train_step, AdamW, BudgetConfig, GateMode, StepContext, TrainConfig, TrainSpec,
};
use adavit::policy::HeadSelectionMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(samples: usize, seed: u64) -> Dataset {
    let spec: SyntheticTaskSpec = serde_json::from_value(serde_json::json!({
        "image_size": 16, "glyph_size": 4, "num_classes": 4, "samples": samples
    }))
    .unwrap();
    generate_synthetic(&spec, seed).unwrap()
}

fn model_config(embed_dim: usize, num_blocks: usize) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        channels: 1,
        embed_dim,
        num_heads: 2,
        num_blocks,
        ffn_multiplier: 2,
        num_classes: 4,
    }
}

fn model(c: &ModelConfig, seed: u64) -> Model<f32> {
    Model::init(c, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn params(m: &Model<f32>) -> Vec<Vec<f32>> {
    m.params.iter().map(|p| p.value.data().to_vec()).collect()
}

fn spec<'a>(train: &'a TrainConfig, budget: &'a BudgetConfig, gates: GateMode<'a>, trainable: Trainable) -> TrainSpec<'a> {
    TrainSpec {
        train,
        budget,
        head_mode: HeadSelectionMode::Full,
        gates,
        trainable,
        seed: 11,
    }
}

/// Full-batch softmax regression on raw pixels, trained to convergence.
fn linear_probe_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let (d, k) = (train.images[0].len() + 1, train.num_classes);
    let features = |img: &[f32]| img.iter().map(|&x| x as f64).chain([1.0]).collect::<Vec<_>>();
    let xs: Vec<Vec<f64>> = train.images.iter().map(|i| features(i)).collect();
    let mut w = vec![0.0f64; d * k];
    let scores = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| (0..d).map(|j| w[c * d + j] * x[j]).sum()).collect()
    };
    for _ in 0..400 {
        let mut grad = vec![0.0; d * k];
        for (x, &y) in xs.iter().zip(&train.labels) {
            let s = scores(&w, x);
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / z - f64::from(u8::from(c == y));
                for j in 0..d {
                    grad[c * d + j] += g * x[j];
                }
            }
        }
        let n = xs.len() as f64;
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= 0.5 * gi / n;
        }
    }
    let correct = test
        .images
        .iter()
        .zip(&test.labels)
        .filter(|(img, &y)| {
            let s = scores(&w, &features(img));
            let best = (0..k).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            best == y
        })
        .count();
    correct as f64 / test.len() as f64
}

#[test]
fn raw_pixels_are_not_linearly_separable() {
    let all = data(2048, 1);
    let (train, test) = all.split_at(1536);
    let acc = linear_probe_accuracy(&train, &test);
    assert!(acc < 0.6, "linear probe reached {acc}");
}

#[test]
fn memorizes_a_small_batch() {
    let c = model_config(16, 2);
    let mut m = model(&c, 1);
    let d = data(32, 2);
    let cfg = TrainConfig {
        lr: 1e-2,
        weight_decay: 0.0,
        ..TrainConfig::new(1, 32)
    };
    let budget = BudgetConfig::uniform(1.0);
    let s = spec(&cfg, &budget, GateMode::Open, Trainable::Backbone);
    let mut opt = AdamW::new(&m, cfg.weight_decay);
    let batch: Vec<usize> = (0..32).collect();
    let exec = Exec::new(1);
    let mut losses = Vec::new();
    for step in 0..100 {
        let ctx = StepContext {
            epoch: 0,
            step,
            lr: cfg.lr,
            tau: budget.tau,
            open: false,
        };
        losses.push(train_step(&mut m, &mut opt, &d, &batch, &s, ctx, &exec).unwrap().ce);
    }
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.25 * first, "ce {first} -> {last}");
}

#[test]
fn usage_loss_alone_steers_decision_networks_to_the_budget() {
    let c = model_config(16, 3);
    let mut m = model(&c, 3);
    let d = data(256, 4);
    let cfg = TrainConfig {
        lr: 3e-2,
        ..TrainConfig::new(20, 32)
    };
    let budget = BudgetConfig {
        lambda_usage: 50.0,
        ..BudgetConfig::uniform(0.25)
    };
    let s = spec(&cfg, &budget, GateMode::Learned, Trainable::Decision);
    let before = params(&m);
    let logs = train(&mut m, &d, &s, &Exec::new(1), |_| {}).unwrap();
    let last = logs.last().unwrap();
    for u in [last.usage_patches, last.usage_heads, last.usage_blocks] {
        let u = u.unwrap();
        assert!((u - 0.25).abs() < 0.1, "usage {u:?} in {last:?}");
    }
    // The backbone is untouched.
    for (p, (a, b)) in m.params.iter().zip(before.iter().zip(params(&m))) {
        if !p.name.starts_with("decision.") {
            assert_eq!(*a, b, "{} changed", p.name);
        }
    }
}

#[test]
fn forced_open_learned_step_equals_gate_free_step() {
    let c = model_config(8, 2);
    let d = data(16, 5);
    let cfg = TrainConfig::new(1, 16);
    let budget = BudgetConfig {
        lambda_usage: 0.0,
        ..BudgetConfig::uniform(0.5)
    };
    let batch: Vec<usize> = (0..16).collect();
    let ctx = |open| StepContext {
        epoch: 0,
        step: 0,
        lr: 1e-3,
        tau: 5.0,
        open,
    };
    let exec = Exec::new(1);

    let mut a = model(&c, 6);
    let mut opt = AdamW::new(&a, cfg.weight_decay);
    let sa = spec(&cfg, &budget, GateMode::Open, Trainable::All);
    let ra = train_step(&mut a, &mut opt, &d, &batch, &sa, ctx(false), &exec).unwrap();

    let mut b = model(&c, 6);
    let mut opt = AdamW::new(&b, cfg.weight_decay);
    let sb = spec(&cfg, &budget, GateMode::Learned, Trainable::All);
    let rb = train_step(&mut b, &mut opt, &d, &batch, &sb, ctx(true), &exec).unwrap();

    assert_eq!(ra.ce, rb.ce);
    assert_eq!(params(&a), params(&b));
}

#[test]
fn training_is_identical_for_any_thread_count() {
    let c = model_config(8, 3);
    let d = data(48, 7);
    let cfg = TrainConfig {
        grad_clip: Some(1.0),
        decision_lr: Some(1e-2),
        ..TrainConfig::new(2, 16)
    };
    let budget = BudgetConfig::uniform(0.5);
    let s = spec(&cfg, &budget, GateMode::Learned, Trainable::All);
    let run = |threads| {
        let mut m = model(&c, 8);
        let logs = train(&mut m, &d, &s, &Exec::new(threads), |_| {}).unwrap();
        (params(&m), serde_json::to_string(&logs).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_eq!(one, run(0));
}
