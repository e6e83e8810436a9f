use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    clip_grad_norm, cosine_lr, usage_coefficients, usage_entry_counts, usage_loss, AdamW,
    BudgetConfig, TrainConfig, UsageAccumulator, UsageSignal,
};
use crate::cost::{policy_flops, static_flops};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::harness::{Dataset, RandomPolicy};
use crate::model::{forward, GateSource, Model, ParamVars, Trainable};
use crate::policy::{GumbelNoise, HeadSelectionMode, Policy};
use crate::rng::{stream, stream_seed, tag};
use crate::tensor::{Tape, Var};

/// How gates are produced while training.
#[derive(Clone, Copy, Debug)]
pub enum GateMode<'a> {
    /// Gate-free backbone.
    Open,
    /// Decision networks with Gumbel-Softmax sampling.
    Learned,
    /// A fresh random policy per sample and step.
    Random(&'a RandomPolicy),
}

#[derive(Clone, Copy, Debug)]
pub struct TrainSpec<'a> {
    pub train: &'a TrainConfig,
    pub budget: &'a BudgetConfig,
    pub head_mode: HeadSelectionMode,
    pub gates: GateMode<'a>,
    pub trainable: Trainable,
    pub seed: u64,
}

/// Batch-level results of one optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub ce: f64,
    pub usage: f64,
    pub total: f64,
    pub correct: usize,
    pub samples: usize,
    /// Summed FLOPs of realized policies; `None` when gates were relaxed.
    pub flops: Option<f64>,
    pub usage_entries: UsageAccumulator,
    pub grad_norm: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    #[serde(rename = "L_ce")]
    pub l_ce: f64,
    #[serde(rename = "L_usage")]
    pub l_usage: f64,
    pub top1: f64,
    pub mean_flops: Option<f64>,
    pub usage_patches: Option<f64>,
    pub usage_heads: Option<f64>,
    pub usage_blocks: Option<f64>,
    pub lr: f64,
    pub tau: f64,
}

struct SampleWork {
    tape: Tape<f32>,
    pv: ParamVars,
    ce: Var,
    /// Per-family sums of the usage signal on the tape.
    usage: Option<[Var; 3]>,
    correct: bool,
    flops: Option<f64>,
    entries: UsageAccumulator,
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sum_vars(tape: &mut Tape<f32>, vars: &[Var]) -> Result<Var> {
    let mut acc = tape.sum(vars[0]);
    for &v in &vars[1..] {
        let s = tape.sum(v);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

#[allow(clippy::too_many_arguments)]
fn forward_sample(
    model: &Model<f32>,
    image: &[f32],
    label: usize,
    spec: &TrainSpec<'_>,
    open: bool,
    tau: f64,
    noise_seed: u64,
) -> Result<SampleWork> {
    let mut tape = Tape::new();
    let pv = model.leaf_params(&mut tape, spec.trainable);
    let mut noise = GumbelNoise::from_seed(noise_seed);
    let random_policy: Policy;
    let mut source = match spec.gates {
        _ if open => GateSource::Vanilla,
        GateMode::Open => GateSource::Vanilla,
        GateMode::Learned => GateSource::Train {
            tau,
            straight_through: spec.budget.straight_through,
            detach_input: spec.budget.detach_decision_input,
            noise: &mut noise,
        },
        GateMode::Random(rp) => {
            random_policy = rp.sample(&mut stream(noise_seed, &[tag::RANDOM_POLICY]));
            GateSource::Fixed(&random_policy)
        }
    };
    let pass = forward(&mut tape, model, &pv, image, &mut source, spec.head_mode)?;
    let ce = tape.cross_entropy(pass.logits, label)?;
    let correct = argmax(tape.value(pass.logits).data()) == label;
    let flops = match (&source, &pass.policy) {
        (GateSource::Vanilla, _) => Some(static_flops(&model.config).total as f64),
        (GateSource::Fixed(_), Some(p)) => Some(
            policy_flops(&model.config, p, spec.head_mode)?
                .without_decision()
                .total as f64,
        ),
        (_, Some(p)) => Some(policy_flops(&model.config, p, spec.head_mode)?.total as f64),
        (_, None) => None,
    };
    let mut entries = UsageAccumulator::default();
    let mut usage = None;
    if matches!(source, GateSource::Train { .. }) {
        entries.push(&pass.blocks, spec.budget.usage_signal);
        let vars: Vec<_> = pass.blocks.iter().filter_map(|b| b.usage).collect();
        if !vars.is_empty() {
            let pick = |f: usize| -> Vec<Var> {
                vars.iter()
                    .map(|u| match (spec.budget.usage_signal, f) {
                        (UsageSignal::Forward, 0) => u.patches,
                        (UsageSignal::Forward, 1) => u.heads,
                        (UsageSignal::Forward, _) => u.block,
                        (UsageSignal::Relaxed, 0) => u.relaxed_patches,
                        (UsageSignal::Relaxed, 1) => u.relaxed_heads,
                        (UsageSignal::Relaxed, _) => u.relaxed_block,
                    })
                    .collect()
            };
            usage = Some([
                sum_vars(&mut tape, &pick(0))?,
                sum_vars(&mut tape, &pick(1))?,
                sum_vars(&mut tape, &pick(2))?,
            ]);
        }
    }
    Ok(SampleWork {
        tape,
        pv,
        ce,
        usage,
        correct,
        flops,
        entries,
    })
}

/// Per-step context derived from the schedule.
#[derive(Clone, Copy, Debug)]
pub struct StepContext {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    /// Gates forced open for this step (gate-free warmup).
    pub open: bool,
}

/// One optimizer step over `batch` (indices into `data`).
///
/// The usage loss couples samples through batch means, so the step runs in
/// two phases: every sample's forward pass on a private tape, then, once
/// the batch means are known, every sample's backward pass on the exact
/// per-sample share of the batch loss. Gradients are summed in sample
/// order, which keeps the result independent of the thread count.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    data: &Dataset,
    batch: &[usize],
    spec: &TrainSpec<'_>,
    ctx: StepContext,
    exec: &Exec,
) -> Result<StepStats> {
    let b = batch.len();
    let m: &Model<f32> = model;
    let mut work = exec
        .map(batch, |k, &i| {
            let noise_seed = stream_seed(
                spec.seed,
                &[tag::GUMBEL, ctx.epoch as u64, ctx.step as u64, k as u64],
            );
            forward_sample(m, &data.images[i], data.labels[i], spec, ctx.open, ctx.tau, noise_seed)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut entries = UsageAccumulator::default();
    let mut ce_sum = 0.0;
    for w in &work {
        entries.extend(&w.entries);
        ce_sum += f64::from(w.tape.scalar(w.ce));
    }
    let ce = ce_sum / b as f64;
    if !ce.is_finite() {
        let culprit = work
            .iter()
            .find_map(|w| w.tape.first_non_finite())
            .unwrap_or_else(|| "cross-entropy loss".into());
        return Err(Error::NonFinite { what: culprit });
    }
    let gated = work.iter().any(|w| w.usage.is_some());
    let (usage, coeffs) = if gated {
        let counts = usage_entry_counts(&model.config);
        let means = entries.means();
        (
            usage_loss(&entries, spec.budget),
            usage_coefficients(means, spec.budget, b, counts),
        )
    } else {
        (0.0, [0.0; 3])
    };

    let grads = exec
        .map_mut(&mut work, |_, w| -> Result<Vec<Option<Vec<f32>>>> {
            let tape = &mut w.tape;
            let mut loss = tape.scale(w.ce, 1.0 / b as f64);
            if let Some(u) = w.usage {
                for (f, &var) in u.iter().enumerate() {
                    let term = tape.scale(var, coeffs[f]);
                    loss = tape.add(loss, term)?;
                }
            }
            let mut g = tape.backward(loss)?;
            Ok(w.pv.vars().iter().map(|&v| g.take(v)).collect())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

    let mut total: Vec<Option<Vec<f32>>> = vec![None; model.params.len()];
    for sample in grads {
        for (acc, g) in total.iter_mut().zip(sample) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
                    None => *acc = Some(g),
                }
            }
        }
    }
    if let Some(pos) = total
        .iter()
        .position(|g| g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite())))
    {
        return Err(Error::NonFinite {
            what: format!("gradient of {}", model.params[pos].name),
        });
    }
    let grad_norm = match spec.train.grad_clip {
        Some(c) => clip_grad_norm(&mut total, c),
        None => clip_grad_norm(&mut total, f64::INFINITY),
    };
    let decision_scale = spec.train.decision_lr.map_or(1.0, |d| d / spec.train.lr);
    let names: Vec<bool> = model
        .params
        .iter()
        .map(|p| p.name.starts_with("decision."))
        .collect();
    opt.step(model, &total, |i| {
        if names[i] {
            ctx.lr * decision_scale
        } else {
            ctx.lr
        }
    });
    if let Some(p) = model.params.iter().find(|p| !p.value.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("parameter {}", p.name),
        });
    }

    let flops = work
        .iter()
        .map(|w| w.flops)
        .sum::<Option<f64>>();
    Ok(StepStats {
        ce,
        usage,
        total: ce + spec.budget.lambda_usage * usage,
        correct: work.iter().filter(|w| w.correct).count(),
        samples: b,
        flops,
        usage_entries: entries,
        grad_norm,
    })
}

/// Full training run; calls `on_epoch` after every epoch.
pub fn train(
    model: &mut Model<f32>,
    data: &Dataset,
    spec: &TrainSpec<'_>,
    exec: &Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    spec.train.validate()?;
    spec.budget.validate()?;
    if data.is_empty() {
        return Err(crate::error::DataError::Empty.into());
    }
    let cfg = spec.train;
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut opt = AdamW::new(model, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(spec.seed, &[tag::SHUFFLE, epoch as u64]));
        let open = epoch < cfg.open_gate_epochs;
        let tau = spec.budget.tau_at(epoch, cfg.epochs);
        let (mut ce, mut usage, mut correct, mut seen) = (0.0, 0.0, 0, 0);
        let mut flops = Some(0.0);
        let mut entries = UsageAccumulator::default();
        let mut lr = cfg.lr;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(cfg.lr, global, total_steps, warmup);
            let ctx = StepContext {
                epoch,
                step,
                lr,
                tau,
                open,
            };
            let s = train_step(model, &mut opt, data, batch, spec, ctx, exec)?;
            ce += s.ce * s.samples as f64;
            usage += s.usage * s.samples as f64;
            correct += s.correct;
            seen += s.samples;
            flops = flops.zip(s.flops).map(|(a, b)| a + b);
            entries.extend(&s.usage_entries);
            global += 1;
        }
        let means = (!entries.heads.is_empty()).then(|| entries.means());
        let log = EpochLog {
            epoch,
            l_ce: ce / seen as f64,
            l_usage: usage / seen as f64,
            top1: correct as f64 / seen as f64,
            mean_flops: flops.map(|f| f / seen as f64),
            usage_patches: means.map(|m| m[0]),
            usage_heads: means.map(|m| m[1]),
            usage_blocks: means.map(|m| m[2]),
            lr,
            tau,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
