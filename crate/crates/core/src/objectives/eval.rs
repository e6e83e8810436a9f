use serde::{Deserialize, Serialize};

use crate::cost::{policy_flops, static_flops};
use crate::error::{DataError, Error, Result};
use crate::exec::Exec;
use crate::harness::{Dataset, Difficulty};
use crate::model::{infer, GateSource, Model};
use crate::policy::{HeadSelectionMode, Policy};

/// Where evaluation gates come from.
#[derive(Clone, Copy, Debug)]
pub enum EvalGates<'a> {
    /// Gate-free backbone, priced at static FLOPs.
    Open,
    /// Decision networks thresholded at 0.5.
    Learned,
    /// One externally supplied policy per sample; decision networks are
    /// neither run nor charged.
    Fixed(&'a [Policy]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: usize,
    pub label: usize,
    pub prediction: usize,
    pub correct: bool,
    pub flops: u64,
    pub difficulty: Difficulty,
    pub policy: Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub mean_flops: f64,
    pub mean_gflops: f64,
    /// Mean hard usage over blocks with decision networks: cumulative patch
    /// fraction, head fraction, executed-sublayer fraction.
    pub usage: [f64; 3],
    pub samples: Vec<SampleEval>,
}

/// Hard usage fractions of one policy over blocks `1..L`.
pub fn policy_usage(policy: &Policy) -> [f64; 3] {
    let blocks = &policy.blocks[1.min(policy.blocks.len())..];
    if blocks.is_empty() {
        return [1.0; 3];
    }
    let n = blocks.len() as f64;
    let frac = |bits: &[bool]| bits.iter().filter(|&&b| b).count() as f64 / bits.len() as f64;
    [
        blocks.iter().map(|b| frac(&b.patches)).sum::<f64>() / n,
        blocks.iter().map(|b| frac(&b.heads)).sum::<f64>() / n,
        blocks.iter().map(|b| frac(&[b.msa, b.ffn])).sum::<f64>() / n,
    ]
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(
    model: &Model<f32>,
    data: &Dataset,
    gates: EvalGates<'_>,
    head_mode: HeadSelectionMode,
    exec: &Exec,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(DataError::Empty.into());
    }
    if let EvalGates::Fixed(p) = gates {
        if p.len() != data.len() {
            return Err(DataError::Mismatch(format!(
                "{} policies for {} samples",
                p.len(),
                data.len()
            ))
            .into());
        }
    }
    let config = &model.config;
    let static_total = static_flops(config).total;
    let ids: Vec<usize> = (0..data.len()).collect();
    let samples = exec
        .map(&ids, |_, &i| -> Result<SampleEval> {
            let image = &data.images[i];
            let (logits, policy, flops) = match gates {
                EvalGates::Open => {
                    let (l, p) = infer(model, image, &mut GateSource::Vanilla, head_mode)?;
                    (l, p, static_total)
                }
                EvalGates::Learned => {
                    let (l, p) = infer(model, image, &mut GateSource::Eval, head_mode)?;
                    let f = policy_flops(config, &p, head_mode)?.total;
                    (l, p, f)
                }
                EvalGates::Fixed(policies) => {
                    let (l, p) =
                        infer(model, image, &mut GateSource::Fixed(&policies[i]), head_mode)?;
                    let f = policy_flops(config, &p, head_mode)?.without_decision().total;
                    (l, p, f)
                }
            };
            if logits.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("logits of sample {i}"),
                });
            }
            let prediction = argmax(&logits);
            Ok(SampleEval {
                id: i,
                label: data.labels[i],
                prediction,
                correct: prediction == data.labels[i],
                flops,
                difficulty: data.difficulty[i],
                policy,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = samples.len() as f64;
    let mean_flops = samples.iter().map(|s| s.flops as f64).sum::<f64>() / n;
    let mut usage = [0.0; 3];
    for s in &samples {
        let u = policy_usage(&s.policy);
        (0..3).for_each(|f| usage[f] += u[f] / n);
    }
    Ok(EvalReport {
        top1: samples.iter().filter(|s| s.correct).count() as f64 / n,
        mean_flops,
        mean_gflops: mean_flops / 1e9,
        usage,
        samples,
    })
}
