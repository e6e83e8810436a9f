use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{ConfigError, Result};
use crate::exec::Exec;
use crate::model::{Model, ModelConfig, Trainable};
use crate::objectives::{
    evaluate, train, BudgetConfig, EvalGates, EvalReport, GateMode, TrainConfig, TrainSpec,
};
use crate::policy::{BlockPolicy, HeadSelectionMode, Policy};
use crate::rng::{stream, tag};

/// Target keep fractions per block. Patch fractions are cumulative (share
/// of patches still alive after the block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockFractions {
    pub patches: Vec<f64>,
    pub heads: Vec<f64>,
    pub msa: Vec<f64>,
    pub ffn: Vec<f64>,
}

impl BlockFractions {
    /// `p`, `h`, `b` on every block with a decision network; the first
    /// block stays fully open.
    pub fn uniform(config: &ModelConfig, p: f64, h: f64, b: f64) -> Self {
        let per = |v: f64| -> Vec<f64> {
            (0..config.num_blocks)
                .map(|l| if config.has_decision(l) { v } else { 1.0 })
                .collect()
        };
        Self {
            patches: per(p),
            heads: per(h),
            msa: per(b),
            ffn: per(b),
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ConfigError> {
        for (name, v) in [
            ("patches", &self.patches),
            ("heads", &self.heads),
            ("msa", &self.msa),
            ("ffn", &self.ffn),
        ] {
            if v.len() != config.num_blocks {
                return Err(ConfigError::field(
                    format!("fractions.{name}"),
                    format!("expected {} entries, got {}", config.num_blocks, v.len()),
                ));
            }
            if let Some(x) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(ConfigError::field(
                    format!("fractions.{name}"),
                    format!("{x} outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

/// Sampler of i.i.d. Bernoulli policies at given per-block fractions.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomPolicy {
    config: ModelConfig,
    fractions: BlockFractions,
}

impl RandomPolicy {
    pub fn new(config: &ModelConfig, fractions: BlockFractions) -> Result<Self, ConfigError> {
        fractions.validate(config)?;
        Ok(Self {
            config: config.clone(),
            fractions,
        })
    }

    pub fn fractions(&self) -> &BlockFractions {
        &self.fractions
    }

    /// Patches are subsampled progressively: a surviving patch is kept with
    /// probability `f_l / f_{l−1}`, so the alive mask is monotone and its
    /// expected size follows the (non-increasing envelope of the) targets.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Policy {
        let f = &self.fractions;
        let mut alive = vec![true; self.config.num_patches()];
        let mut prev = 1.0;
        let mut blocks = Vec::with_capacity(self.config.num_blocks);
        for l in 0..self.config.num_blocks {
            let target = f.patches[l].min(prev);
            let keep = if prev > 0.0 { target / prev } else { 0.0 };
            prev = target;
            for a in alive.iter_mut().filter(|a| **a) {
                *a = rng.random_bool(keep);
            }
            blocks.push(BlockPolicy {
                patches: alive.clone(),
                heads: (0..self.config.num_heads)
                    .map(|_| rng.random_bool(f.heads[l]))
                    .collect(),
                msa: rng.random_bool(f.msa[l]),
                ffn: rng.random_bool(f.ffn[l]),
            });
        }
        Policy { blocks }
    }
}

/// One random policy per sample, each from its own stream under `seed`.
pub fn random_policy(
    config: &ModelConfig,
    fractions: &BlockFractions,
    seed: u64,
    count: usize,
) -> Result<Vec<Policy>, ConfigError> {
    let sampler = RandomPolicy::new(config, fractions.clone())?;
    Ok((0..count)
        .map(|i| sampler.sample(&mut stream(seed, &[tag::RANDOM_POLICY, i as u64])))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Upperbound,
    Random,
    RandomPlus,
}

impl BaselineKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Upperbound => "upperbound",
            BaselineKind::Random => "random",
            BaselineKind::RandomPlus => "random_plus",
        }
    }
}

/// Inputs shared by the baselines.
pub struct BaselineSetup<'a> {
    /// Trained gate-free backbone.
    pub backbone: &'a Model<f32>,
    pub train_data: &'a Dataset,
    pub test_data: &'a Dataset,
    pub fractions: &'a BlockFractions,
    /// Finetuning schedule for Random+.
    pub finetune: &'a TrainConfig,
    pub head_mode: HeadSelectionMode,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub kind: BaselineKind,
    pub report: EvalReport,
    /// The finetuned model for Random+, the backbone otherwise.
    pub model: Model<f32>,
}

/// Upperbound: every gate open. Random: fresh random policies on the
/// backbone. Random+: the backbone finetuned under per-sample re-drawn
/// random policies, then evaluated with fresh random policies.
pub fn run_baseline(kind: BaselineKind, setup: &BaselineSetup<'_>, exec: &Exec) -> Result<BaselineOutcome> {
    let config = &setup.backbone.config;
    let eval_policies = || random_policy(config, setup.fractions, setup.seed, setup.test_data.len());
    let (report, model) = match kind {
        BaselineKind::Upperbound => (
            evaluate(setup.backbone, setup.test_data, EvalGates::Open, setup.head_mode, exec)?,
            setup.backbone.clone(),
        ),
        BaselineKind::Random => {
            let policies = eval_policies()?;
            (
                evaluate(
                    setup.backbone,
                    setup.test_data,
                    EvalGates::Fixed(&policies),
                    setup.head_mode,
                    exec,
                )?,
                setup.backbone.clone(),
            )
        }
        BaselineKind::RandomPlus => {
            let sampler = RandomPolicy::new(config, setup.fractions.clone())?;
            let mut model = setup.backbone.clone();
            let budget = BudgetConfig::default();
            let spec = TrainSpec {
                train: setup.finetune,
                budget: &budget,
                head_mode: setup.head_mode,
                gates: GateMode::Random(&sampler),
                trainable: Trainable::Backbone,
                seed: setup.seed,
            };
            train(&mut model, setup.train_data, &spec, exec, |_| {})?;
            let policies = eval_policies()?;
            (
                evaluate(
                    &model,
                    setup.test_data,
                    EvalGates::Fixed(&policies),
                    setup.head_mode,
                    exec,
                )?,
                model,
            )
        }
    };
    Ok(BaselineOutcome {
        kind,
        report,
        model,
    })
}
