use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint;
use super::forward::{decision_logits, DecisionLogits};
use super::*;
use crate::policy::{
    sample_gates, BlockPolicy, GumbelNoise, HeadSelectionMode, Policy, SampleMode,
};
use crate::tensor::gradcheck::relative_error;
use crate::tensor::{Tape, Tensor, Var};

fn tiny(image: usize, patch: usize, d: usize, h: usize, l: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        image_size: image,
        patch_size: patch,
        channels: 1,
        embed_dim: d,
        num_heads: h,
        num_blocks: l,
        ffn_multiplier: 2,
        num_classes: classes,
    }
}

/// Model with weights large enough that every path matters numerically.
fn random_model(config: &ModelConfig, seed: u64, scale: f64) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::init(config, &mut rng);
    for p in &mut model.params {
        for x in p.value.data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
    model
}

fn random_image(config: &ModelConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.image_len()).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn run(model: &Model<f64>, image: &[f64], source: &mut GateSource<'_>, mode: HeadSelectionMode) -> Vec<f64> {
    infer(model, image, source, mode).unwrap().0
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn set(model: &mut Model<f64>, name: &str, f: impl Fn(&mut f64)) {
    let id = model.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    model.param_mut(id).value.data_mut().iter_mut().for_each(f);
}

#[test]
fn patchify_raster_order_channels_last() {
    let mut c = tiny(4, 2, 4, 1, 1, 2);
    c.channels = 2;
    let image: Vec<f64> = (0..32).map(f64::from).collect();
    let p = patchify(&c, &image).unwrap();
    assert_eq!(p.shape(), &[4, 8]);
    // Top-left patch: pixels (0,0),(0,1),(1,0),(1,1), two channels each.
    assert_eq!(&p.data()[..8], &[0.0, 1.0, 2.0, 3.0, 8.0, 9.0, 10.0, 11.0]);
    // Second patch is to the right of the first.
    assert_eq!(p.get(1, 0), 4.0);
    assert!(patchify(&c, &image[..31]).is_err());
}

#[test]
fn zero_image_and_weights_give_positional_embedding() {
    let c = tiny(8, 4, 8, 2, 1, 3);
    let mut m = random_model(&c, 1, 0.5);
    set(&mut m, "embed.weight", |x| *x = 0.0);
    set(&mut m, "embed.bias", |x| *x = 0.0);
    set(&mut m, "cls_token", |x| *x = 0.0);
    let mut tape = Tape::new();
    let pv = m.leaf_params(&mut tape, Trainable::None);
    let z = patchify_embed(&mut tape, &m, &pv, &vec![0.0; 64]).unwrap();
    assert_eq!(tape.shape(z), &[5, 8]);
    let pos = m.param(m.layout.pos_embed).value.data();
    assert_eq!(tape.value(z).data(), pos);
}

#[test]
fn single_pixel_moves_one_patch_row() {
    let c = tiny(8, 4, 8, 2, 1, 3);
    let m = random_model(&c, 2, 0.5);
    let embed = |image: &[f64]| {
        let mut tape = Tape::new();
        let pv = m.leaf_params(&mut tape, Trainable::None);
        let z = patchify_embed(&mut tape, &m, &pv, image).unwrap();
        tape.value(z).clone()
    };
    let base = embed(&vec![0.0; 64]);
    let mut image = vec![0.0; 64];
    image[5 * 8 + 6] = 1.0; // row 5, col 6 → bottom-right patch (index 3)
    let moved = embed(&image);
    for row in 0..5 {
        let changed = (0..8).any(|j| base.get(row, j) != moved.get(row, j));
        assert_eq!(changed, row == 4, "row {row}");
    }
}

fn head_weights(tape: &mut Tape<f64>, d: usize, dk: usize, seed: u64) -> (Var, Var, Var, [Tensor<f64>; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = || {
        let data = (0..d * dk).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(&[d, dk], data).unwrap()
    };
    let ts = [w(), w(), w()];
    let q = tape.constant(ts[0].clone());
    let k = tape.constant(ts[1].clone());
    let v = tape.constant(ts[2].clone());
    (q, k, v, ts)
}

#[test]
fn attention_single_token_returns_value_projection() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap());
    let (q, k, v, _) = head_weights(&mut tape, 3, 2, 3);
    let (out, val) = attention_head(&mut tape, z, q, k, v, None).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(val).data());
}

#[test]
fn attention_zero_query_is_uniform() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let z = tape.constant(Tensor::new(&[4, 3], data).unwrap());
    let (_, k, v, _) = head_weights(&mut tape, 3, 2, 4);
    let q = tape.constant(Tensor::zeros(&[3, 2]));
    let (out, val) = attention_head(&mut tape, z, q, k, v, None).unwrap();
    let vals = tape.value(val);
    for col in 0..2 {
        let mean = (0..4).map(|r| vals.get(r, col)).sum::<f64>() / 4.0;
        for row in 0..4 {
            assert!((tape.value(out).get(row, col) - mean).abs() < 1e-12);
        }
    }
}

/// Scalar-loop attention used as an independent reference.
fn attention_reference(z: &Tensor<f64>, w: &[Tensor<f64>; 3]) -> Vec<f64> {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let dk = w[0].shape()[1];
    let proj = |m: &Tensor<f64>| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..dk).map(|c| (0..d).map(|j| z.get(i, j) * m.get(j, c)).sum()).collect())
            .collect()
    };
    let (q, k, v) = (proj(&w[0]), proj(&w[1]), proj(&w[2]));
    let mut out = Vec::new();
    for i in 0..n {
        let s: Vec<f64> = (0..n)
            .map(|j| (0..dk).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
        let tot: f64 = e.iter().sum();
        for c in 0..dk {
            out.push((0..n).map(|j| e[j] / tot * v[j][c]).sum());
        }
    }
    out
}

#[test]
fn attention_matches_scalar_loop() {
    let mut tape = Tape::new();
    let data: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).cos()).collect();
    let zt = Tensor::new(&[3, 4], data).unwrap();
    let z = tape.constant(zt.clone());
    let (q, k, v, ws) = head_weights(&mut tape, 4, 2, 5);
    let (out, _) = attention_head(&mut tape, z, q, k, v, None).unwrap();
    assert!(max_abs_diff(tape.value(out).data(), &attention_reference(&zt, &ws)) < 1e-12);
}

fn normed_tokens(m: &Model<f64>, tape: &mut Tape<f64>, pv: &ParamVars, seed: u64) -> Var {
    let img = random_image(&m.config, seed);
    let z = patchify_embed(tape, m, pv, &img).unwrap();
    let b = &m.layout.blocks[0];
    tape.layernorm(z, pv.get(b.ln1_gain), pv.get(b.ln1_bias)).unwrap()
}

#[test]
fn partial_closed_head_passes_value_projection() {
    let c = tiny(8, 4, 8, 2, 1, 3);
    let m = random_model(&c, 6, 0.5);
    let mut tape = Tape::new();
    let pv = m.leaf_params(&mut tape, Trainable::None);
    let x = normed_tokens(&m, &mut tape, &pv, 7);
    let mut gates = BlockGates::open(2);
    gates.head_mode = HeadSelectionMode::Partial;
    gates.heads[1] = Gate::Closed;
    let out = msa(&mut tape, &m, &pv, 0, x, &gates).unwrap().unwrap();

    // Reference: concat(head0, Z W_V^1) W_O built by hand.
    let hp = &m.layout.blocks[0].heads;
    let (h0, _) = attention_head(
        &mut tape,
        x,
        pv.get(hp[0].w_q),
        pv.get(hp[0].w_k),
        pv.get(hp[0].w_v),
        None,
    )
    .unwrap();
    let v1 = tape.matmul(x, pv.get(hp[1].w_v)).unwrap();
    let cat = tape.concat(&[h0, v1], 1).unwrap();
    let reference = tape.matmul(cat, pv.get(m.layout.blocks[0].w_o)).unwrap();
    assert_eq!(tape.value(out).data(), tape.value(reference).data());
}

#[test]
fn full_mode_all_heads_off_and_all_on() {
    let c = tiny(8, 4, 8, 2, 1, 3);
    let m = random_model(&c, 8, 0.5);
    let mut tape = Tape::new();
    let pv = m.leaf_params(&mut tape, Trainable::None);
    let x = normed_tokens(&m, &mut tape, &pv, 9);
    let mut off = BlockGates::open(2);
    off.heads = vec![Gate::Closed; 2];
    assert!(msa(&mut tape, &m, &pv, 0, x, &off).unwrap().is_none());

    let z = tape.constant(Tensor::from_f64(&[5, 8], &random_image(&tiny(10, 1, 1, 1, 1, 1), 1)[..40]).unwrap());
    let skipped_msa = block_forward(&mut tape, &m, &pv, 0, z, &off).unwrap();
    let ffn_only = BlockGates {
        msa: Gate::Closed,
        ..BlockGates::open(2)
    };
    let reference = block_forward(&mut tape, &m, &pv, 0, z, &ffn_only).unwrap();
    assert_eq!(tape.value(skipped_msa).data(), tape.value(reference).data());

    let open = msa(&mut tape, &m, &pv, 0, x, &BlockGates::open(2)).unwrap().unwrap();
    let mut on = BlockGates::open(2);
    on.heads = vec![Gate::Open; 2];
    let again = msa(&mut tape, &m, &pv, 0, x, &on).unwrap().unwrap();
    assert_eq!(tape.value(open).data(), tape.value(again).data());
}

#[test]
fn residual_passthrough_and_block_skips() {
    let c = tiny(8, 4, 8, 2, 1, 3);
    let mut m = random_model(&c, 10, 0.5);
    let mut tape = Tape::new();
    let pv = m.leaf_params(&mut tape, Trainable::None);
    let z0 = patchify_embed(&mut tape, &m, &pv, &random_image(&c, 11)).unwrap();
    let skip = BlockGates {
        msa: Gate::Closed,
        ffn: Gate::Closed,
        ..BlockGates::open(2)
    };
    let z1 = block_forward(&mut tape, &m, &pv, 0, z0, &skip).unwrap();
    assert_eq!(tape.value(z0).data(), tape.value(z1).data());

    // (0, 1): FFN applied directly to Z plus residual, composed by hand.
    let ffn_only = BlockGates {
        msa: Gate::Closed,
        ..BlockGates::open(2)
    };
    let z2 = block_forward(&mut tape, &m, &pv, 0, z0, &ffn_only).unwrap();
    let b = &m.layout.blocks[0];
    let h = tape.layernorm(z0, pv.get(b.ln2_gain), pv.get(b.ln2_bias)).unwrap();
    let u = tape.matmul(h, pv.get(b.ffn_w1)).unwrap();
    let u = tape.add_row(u, pv.get(b.ffn_b1)).unwrap();
    let u = tape.gelu(u);
    let u = tape.matmul(u, pv.get(b.ffn_w2)).unwrap();
    let u = tape.add_row(u, pv.get(b.ffn_b2)).unwrap();
    let reference = tape.add(z0, u).unwrap();
    assert_eq!(tape.value(z2).data(), tape.value(reference).data());

    // Zeroed sublayer weights: the open block is an identity.
    for name in ["blocks.0.w_o", "blocks.0.ffn.w2", "blocks.0.ffn.b2"] {
        set(&mut m, name, |x| *x = 0.0);
    }
    let mut tape = Tape::new();
    let pv = m.leaf_params(&mut tape, Trainable::None);
    let z0 = patchify_embed(&mut tape, &m, &pv, &random_image(&c, 11)).unwrap();
    let z1 = block_forward(&mut tape, &m, &pv, 0, z0, &BlockGates::open(2)).unwrap();
    assert_eq!(tape.value(z0).data(), tape.value(z1).data());
}

#[test]
fn classifier_cases() {
    let c = tiny(8, 4, 2, 1, 1, 2);
    let mut m = random_model(&c, 12, 0.5);
    set(&mut m, "classifier.weight", |x| *x = 0.0);
    let img = random_image(&c, 13);
    assert_eq!(run(&m, &img, &mut GateSource::Vanilla, HeadSelectionMode::Full), vec![0.0, 0.0]);

    // Hand-set class token row, identity-free dot product.
    let id = m.layout.classifier;
    m.param_mut(id).value = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let pv = m.leaf_params(&mut tape, Trainable::None);
    let z = tape.constant(Tensor::new(&[2, 2], vec![0.5, -1.0, 9.0, 9.0]).unwrap());
    let logits = classify(&mut tape, &m, &pv, z).unwrap();
    assert_eq!(tape.value(logits).data(), &[0.5 - 3.0, 1.0 - 4.0]);
}

#[test]
fn logits_invariant_to_patch_permutation_without_positions() {
    let c = tiny(12, 4, 8, 2, 2, 3);
    let mut m = random_model(&c, 14, 0.5);
    set(&mut m, "pos_embed", |x| *x = 0.0);
    let img = random_image(&c, 15);
    // Swap patch (0,0) with patch (2,1).
    let mut swapped = img.clone();
    for y in 0..4 {
        for x in 0..4 {
            let a = y * 12 + x;
            let b = (8 + y) * 12 + 4 + x;
            swapped.swap(a, b);
        }
    }
    let mode = HeadSelectionMode::Full;
    let a = run(&m, &img, &mut GateSource::Vanilla, mode);
    let b = run(&m, &swapped, &mut GateSource::Vanilla, mode);
    assert!(max_abs_diff(&a, &b) < 1e-12);
}

#[test]
fn forced_open_policy_matches_vanilla() {
    for seed in 0..10 {
        let c = tiny(8, 2, 8, 2, 3, 4);
        let m = random_model(&c, 100 + seed, 0.3);
        let img = random_image(&c, 200 + seed);
        let open = Policy::open(&c);
        for mode in [HeadSelectionMode::Full, HeadSelectionMode::Partial] {
            let a = run(&m, &img, &mut GateSource::Vanilla, mode);
            let b = run(&m, &img, &mut GateSource::Fixed(&open), mode);
            assert!(max_abs_diff(&a, &b) <= 1e-12, "seed {seed}");
        }
    }
}

#[test]
fn hard_patch_mask_equals_row_deletion() {
    let c = tiny(8, 4, 8, 2, 2, 3);
    let m = random_model(&c, 16, 0.5);
    let img = random_image(&c, 17);
    for j in 0..4 {
        let mut policy = Policy::open(&c);
        policy.blocks[0].patches[j] = false;
        policy.blocks[1].patches[j] = false;
        let masked = run(&m, &img, &mut GateSource::Fixed(&policy), HeadSelectionMode::Full);

        let mut tape = Tape::new();
        let pv = m.leaf_params(&mut tape, Trainable::None);
        let z = patchify_embed(&mut tape, &m, &pv, &img).unwrap();
        let rows: Vec<usize> = (0..5).filter(|&r| r != j + 1).collect();
        let mut z = tape.select_rows(z, &rows).unwrap();
        for l in 0..2 {
            z = block_forward(&mut tape, &m, &pv, l, z, &BlockGates::open(2)).unwrap();
        }
        let logits = classify(&mut tape, &m, &pv, z).unwrap();
        assert!(max_abs_diff(&masked, tape.value(logits).data()) <= 1e-5, "patch {j}");
    }
}

#[test]
fn all_patches_dropped_stays_finite() {
    let c = tiny(8, 4, 8, 2, 2, 3);
    let m = random_model(&c, 18, 0.5);
    let mut policy = Policy::open(&c);
    policy.blocks[0].patches = vec![false; 4];
    policy.make_monotone();
    let (logits, realized) = infer(
        &m,
        &random_image(&c, 19),
        &mut GateSource::Fixed(&policy),
        HeadSelectionMode::Full,
    )
    .unwrap();
    assert!(logits.iter().all(|x| x.is_finite()));
    assert_eq!(realized.blocks[1].kept_patches(), 0);
}

#[test]
fn zero_decision_weights_give_half() {
    let c = tiny(8, 4, 8, 2, 2, 3);
    let mut m = random_model(&c, 20, 0.5);
    for name in ["patch", "head", "block"] {
        set(&mut m, &format!("decision.1.{name}.weight"), |x| *x = 0.0);
        set(&mut m, &format!("decision.1.{name}.bias"), |x| *x = 0.0);
    }
    let mut tape = Tape::new();
    let pv = m.leaf_params(&mut tape, Trainable::None);
    let z = patchify_embed(&mut tape, &m, &pv, &random_image(&c, 21)).unwrap();
    let p = decision_forward(&mut tape, &m, &pv, 1, z).unwrap();
    assert_eq!((p.patches.len(), p.heads.len()), (4, 2));
    assert!(p.patches.iter().chain(&p.heads).chain(&p.block).all(|&x| x == 0.5));
    assert!(decision_forward(&mut tape, &m, &pv, 0, z).is_err());
}

#[test]
fn patch_probabilities_are_per_token() {
    let c = tiny(8, 4, 8, 2, 2, 3);
    let m = random_model(&c, 22, 0.5);
    let mut tape = Tape::new();
    let pv = m.leaf_params(&mut tape, Trainable::None);
    let base: Vec<f64> = (0..40).map(|i| (i as f64 * 0.7).sin()).collect();
    let mut perturbed = base.clone();
    for v in &mut perturbed[2 * 8..3 * 8] {
        *v += 1.5; // token row 2 ↔ patch 1
    }
    let a = tape.constant(Tensor::new(&[5, 8], base).unwrap());
    let b = tape.constant(Tensor::new(&[5, 8], perturbed).unwrap());
    let pa = decision_forward(&mut tape, &m, &pv, 1, a).unwrap();
    let pb = decision_forward(&mut tape, &m, &pv, 1, b).unwrap();
    for j in 0..4 {
        assert_eq!(pa.patches[j] == pb.patches[j], j != 1, "patch {j}");
    }
    assert_eq!(pa.heads, pb.heads);
}

#[test]
fn training_gates_match_sample_gates() {
    let c = tiny(8, 4, 8, 2, 3, 3);
    let m = random_model(&c, 23, 0.5);
    let img = random_image(&c, 24);
    let mut tape = Tape::new();
    let pv = m.leaf_params(&mut tape, Trainable::All);
    let mut noise = GumbelNoise::from_seed(5);
    let pass = forward(
        &mut tape,
        &m,
        &pv,
        &img,
        &mut GateSource::Train {
            tau: 5.0,
            straight_through: true,
            detach_input: false,
            noise: &mut noise,
        },
        HeadSelectionMode::Full,
    )
    .unwrap();
    let mut replay = GumbelNoise::replay(noise.into_drawn());
    let mut alive = vec![true; 4];
    for trace in &pass.blocks[1..] {
        let probs = trace.probabilities.as_ref().unwrap();
        let expected = sample_gates(probs, &alive, 5.0, SampleMode::Train, true, &mut replay).unwrap();
        let got = trace.decisions.as_ref().unwrap();
        assert_eq!(got.patches, expected.patches);
        assert_eq!(got.heads, expected.heads);
        assert_eq!(got.block, expected.block);
        assert_eq!(got.alive, expected.alive);
        assert!(max_abs_diff(&got.relaxed_patches, &expected.relaxed_patches) < 1e-12);
        alive = expected.alive;
    }
    let policy = pass.policy.expect("straight-through forward is hard");
    assert!(policy.is_monotone());
}

#[test]
fn eval_is_deterministic_and_monotone() {
    let c = tiny(8, 2, 8, 2, 4, 3);
    let m = random_model(&c, 25, 1.0);
    let img = random_image(&c, 26);
    let a = infer(&m, &img, &mut GateSource::Eval, HeadSelectionMode::Full).unwrap();
    let b = infer(&m, &img, &mut GateSource::Eval, HeadSelectionMode::Full).unwrap();
    assert_eq!(a, b);
    assert!(a.1.is_monotone());
    // The realized eval policy replays to the same logits as a fixed policy.
    let fixed = run(&m, &img, &mut GateSource::Fixed(&a.1), HeadSelectionMode::Full);
    assert_eq!(fixed, a.0);
}

/// Relaxed training forward with replayed noise; loss couples the
/// classifier and every gate so all parameters receive gradient.
fn relaxed_loss(
    tape: &mut Tape<f64>,
    model: &Model<f64>,
    pv: &ParamVars,
    image: &[f64],
    noise: Vec<f64>,
) -> (Var, Vec<f64>) {
    let mut noise = GumbelNoise::replay(noise);
    let pass = forward(
        tape,
        model,
        pv,
        image,
        &mut GateSource::Train {
            tau: 5.0,
            straight_through: false,
            detach_input: false,
            noise: &mut noise,
        },
        HeadSelectionMode::Partial,
    )
    .unwrap();
    let mut loss = tape.cross_entropy(pass.logits, 1).unwrap();
    for u in pass.blocks.iter().filter_map(|b| b.usage) {
        for v in [u.patches, u.heads, u.block] {
            let s = tape.mean(v);
            let s = tape.scale(s, 0.3);
            loss = tape.add(loss, s).unwrap();
        }
    }
    (loss, noise.into_drawn())
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let c = tiny(4, 2, 4, 2, 2, 3);
    let mut model = random_model(&c, 27, 0.6);
    let img = random_image(&c, 28);
    let noise = {
        let mut n = GumbelNoise::from_seed(29);
        (0..64).map(|_| n.gumbel()).collect::<Vec<_>>()
    };

    let mut tape = Tape::new();
    let pv = model.leaf_params(&mut tape, Trainable::All);
    let (loss, _) = relaxed_loss(&mut tape, &model, &pv, &img, noise.clone());
    let mut grads = tape.backward(loss).unwrap();
    let analytic = model.collect_grads(&pv, &mut grads);

    let eval = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let pv = m.leaf_params(&mut tape, Trainable::None);
        let (loss, _) = relaxed_loss(&mut tape, m, &pv, &img, noise.clone());
        tape.scalar(loss)
    };
    let step = 1e-5;
    let mut worst = (0.0, String::new());
    for i in 0..model.params.len() {
        let n = model.params[i].value.numel();
        let mut numeric = Vec::with_capacity(n);
        for j in 0..n {
            let orig = model.params[i].value.data()[j];
            model.params[i].value.data_mut()[j] = orig + step;
            let up = eval(&model);
            model.params[i].value.data_mut()[j] = orig - step;
            let down = eval(&model);
            model.params[i].value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * step));
        }
        let a = analytic[i].clone().unwrap_or_else(|| vec![0.0; n]);
        let name = &model.params[i].name;
        if name.starts_with("decision.") && name.ends_with("weight") {
            assert!(a.iter().any(|&g| g != 0.0), "{name} has zero gradient");
        }
        let err = relative_error(&a, &numeric);
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    assert!(worst.0 < 1e-4, "worst relative error {} at {}", worst.0, worst.1);
}

#[test]
fn decision_logits_shapes() {
    let c = tiny(8, 4, 8, 2, 2, 3);
    let m = random_model(&c, 30, 0.5);
    let mut tape = Tape::new();
    let pv = m.leaf_params(&mut tape, Trainable::None);
    let z = patchify_embed(&mut tape, &m, &pv, &random_image(&c, 31)).unwrap();
    let DecisionLogits { patches, heads, block } = decision_logits(&mut tape, &m, &pv, 1, z).unwrap();
    assert_eq!(tape.shape(patches), &[4, 1]);
    assert_eq!(tape.shape(heads), &[1, 2]);
    assert_eq!(tape.shape(block), &[1, 2]);
}

#[test]
fn fixed_policy_rejects_wrong_shape() {
    let c = tiny(8, 4, 8, 2, 2, 3);
    let m = random_model(&c, 32, 0.5);
    let mut policy = Policy::open(&c);
    policy.blocks[1] = BlockPolicy {
        heads: vec![true; 3],
        ..policy.blocks[1].clone()
    };
    let r = infer(&m, &random_image(&c, 33), &mut GateSource::Fixed(&policy), HeadSelectionMode::Full);
    assert!(r.is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let c = tiny(8, 4, 8, 2, 2, 3);
    let m = random_model(&c, 34, 0.5).cast::<f32>();
    let bytes = checkpoint::to_bytes(&m);
    let back: Model<f32> = checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back.config, m.config);
    for (a, b) in m.params.iter().zip(&back.params) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
    assert_eq!(checkpoint::to_bytes(&back), bytes);
}

#[test]
fn checkpoint_corruption_detected() {
    let c = tiny(8, 4, 8, 2, 2, 3);
    let m = random_model(&c, 35, 0.5);
    let bytes = checkpoint::to_bytes(&m);
    let p = Path::new("mem");
    let is_corrupt = |r: Result<Model<f64>, CheckpointError>| matches!(r, Err(CheckpointError::Corrupt { .. }));
    assert!(is_corrupt(checkpoint::from_bytes(&bytes[..bytes.len() - 8], p)));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(is_corrupt(checkpoint::from_bytes(&extra, p)));
    assert!(is_corrupt(checkpoint::from_bytes(&bytes[..10], p)));
    let mut bad_header = bytes.clone();
    bad_header[20] = b'#';
    assert!(is_corrupt(checkpoint::from_bytes(&bad_header, p)));
    // Loading at the wrong precision is a dtype mismatch.
    assert!(matches!(
        checkpoint::from_bytes::<f32>(&bytes, p),
        Err(CheckpointError::Corrupt { .. })
    ));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        checkpoint::load::<f64>(&dir.path().join("nope.bin")),
        Err(CheckpointError::Missing { .. })
    ));
}
