//! Training objective, optimizer and loops.

mod eval;
mod optim;
mod train;

pub use eval::{evaluate, policy_usage, EvalGates, EvalReport, SampleEval};
pub use optim::{clip_grad_norm, cosine_lr, AdamW};
pub use train::{train, train_step, EpochLog, GateMode, StepContext, StepStats, TrainSpec};

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::model::{BlockTrace, ModelConfig};

/// Which gate values feed the usage loss during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsageSignal {
    /// The relaxed Gumbel-Softmax values.
    Relaxed,
    /// The forward gate values: hard when straight-through is on, with the
    /// relaxed gradient.
    #[default]
    Forward,
}

fn default_tau() -> f64 {
    5.0
}

fn default_lambda() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Target keep fractions and relaxation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetConfig {
    pub gamma_p: f64,
    pub gamma_h: f64,
    pub gamma_b: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lambda")]
    pub lambda_usage: f64,
    #[serde(default)]
    pub usage_signal: UsageSignal,
    #[serde(default = "default_true")]
    pub straight_through: bool,
    /// Temperature reached at the last epoch; `None` keeps `tau` fixed.
    #[serde(default)]
    pub tau_final: Option<f64>,
    /// Stop gradients from the decision networks at their token inputs.
    #[serde(default = "default_true")]
    pub detach_decision_input: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self::uniform(0.5)
    }
}

impl BudgetConfig {
    pub fn uniform(gamma: f64) -> Self {
        Self {
            gamma_p: gamma,
            gamma_h: gamma,
            gamma_b: gamma,
            tau: default_tau(),
            lambda_usage: default_lambda(),
            usage_signal: UsageSignal::default(),
            straight_through: true,
            tau_final: None,
            detach_decision_input: true,
        }
    }

    pub fn gammas(&self) -> [f64; 3] {
        [self.gamma_p, self.gamma_h, self.gamma_b]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, g) in [
            ("gamma_p", self.gamma_p),
            ("gamma_h", self.gamma_h),
            ("gamma_b", self.gamma_b),
        ] {
            if !(g > 0.0 && g <= 1.0) {
                return Err(ConfigError::field(
                    format!("budget.{name}"),
                    format!("must lie in (0, 1], got {g}"),
                ));
            }
        }
        for (name, t) in [("tau", Some(self.tau)), ("tau_final", self.tau_final)] {
            if let Some(t) = t {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(ConfigError::field(
                        format!("budget.{name}"),
                        format!("must be positive, got {t}"),
                    ));
                }
            }
        }
        if !(self.lambda_usage >= 0.0 && self.lambda_usage.is_finite()) {
            return Err(ConfigError::field(
                "budget.lambda_usage",
                "must be non-negative",
            ));
        }
        Ok(())
    }

    /// Temperature for `epoch`, geometric between `tau` and `tau_final`.
    pub fn tau_at(&self, epoch: usize, epochs: usize) -> f64 {
        match self.tau_final {
            Some(end) if epochs > 1 => {
                let t = epoch as f64 / (epochs - 1) as f64;
                self.tau * (end / self.tau).powf(t)
            }
            _ => self.tau,
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}

fn default_wd() -> f64 {
    0.05
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Linear learning-rate warmup before the cosine decay.
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Leading epochs trained with every gate open.
    #[serde(default)]
    pub open_gate_epochs: usize,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Learning rate for decision-network parameters; defaults to `lr`.
    #[serde(default)]
    pub decision_lr: Option<f64>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize) -> Self {
        Self {
            lr: default_lr(),
            weight_decay: default_wd(),
            epochs,
            batch_size,
            warmup_epochs: 0,
            open_gate_epochs: 0,
            grad_clip: None,
            decision_lr: None,
        }
    }

    /// The large-scale recipe: lr 5e-4, weight decay 0.065, cosine schedule.
    pub fn imagenet_preset(epochs: usize, batch_size: usize) -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 0.065,
            ..Self::new(epochs, batch_size)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(ConfigError::field("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::field("train.batch_size", "must be positive"));
        }
        for (name, v) in [("lr", Some(self.lr)), ("decision_lr", self.decision_lr)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(ConfigError::field(format!("train.{name}"), "must be positive"));
                }
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(ConfigError::field("train.weight_decay", "must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(ConfigError::field("train.grad_clip", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Gate entries of one or more samples, flattened per family.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UsageAccumulator {
    pub patches: Vec<f64>,
    pub heads: Vec<f64>,
    pub blocks: Vec<f64>,
}

/// Per-sample entry counts `(D_p, D_h, D_b)` over blocks with decision nets.
pub fn usage_entry_counts(config: &ModelConfig) -> [usize; 3] {
    let l = config.decision_blocks();
    [l * config.num_patches(), l * config.num_heads, l * 2]
}

impl UsageAccumulator {
    /// Appends one sample's gates. Patch entries are cumulative alive
    /// values, so a dropped patch keeps counting as dropped.
    pub fn push(&mut self, traces: &[BlockTrace], signal: UsageSignal) {
        let mut alive: Option<Vec<f64>> = None;
        for d in traces.iter().filter_map(|t| t.decisions.as_ref()) {
            let (p, h, b) = match signal {
                UsageSignal::Relaxed => (&d.relaxed_patches, &d.relaxed_heads, d.relaxed_block),
                UsageSignal::Forward => (&d.patches, &d.heads, d.block),
            };
            let cum: Vec<f64> = match &alive {
                Some(prev) => prev.iter().zip(p).map(|(a, x)| a * x).collect(),
                None => p.clone(),
            };
            self.patches.extend_from_slice(&cum);
            alive = Some(cum);
            self.heads.extend_from_slice(h);
            self.blocks.extend_from_slice(&b);
        }
    }

    pub fn extend(&mut self, other: &UsageAccumulator) {
        self.patches.extend_from_slice(&other.patches);
        self.heads.extend_from_slice(&other.heads);
        self.blocks.extend_from_slice(&other.blocks);
    }

    /// Global mean per family; `NaN` for an empty family.
    pub fn means(&self) -> [f64; 3] {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        [mean(&self.patches), mean(&self.heads), mean(&self.blocks)]
    }
}

/// `Σ_f (mean_f − γ_f)²` over patches, heads and blocks.
pub fn usage_loss(acc: &UsageAccumulator, budget: &BudgetConfig) -> f64 {
    acc.means()
        .iter()
        .zip(budget.gammas())
        .map(|(m, g)| (m - g) * (m - g))
        .sum()
}

/// Gradient of `λ·usage_loss` with respect to each entry of family `f`,
/// for a batch of `batch` samples with `entries` gate values each.
pub fn usage_coefficients(
    means: [f64; 3],
    budget: &BudgetConfig,
    batch: usize,
    entries: [usize; 3],
) -> [f64; 3] {
    let g = budget.gammas();
    std::array::from_fn(|f| {
        budget.lambda_usage * 2.0 * (means[f] - g[f]) / (batch * entries[f]) as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn usage_loss_closed_forms() {
        let budget = BudgetConfig::uniform(0.5);
        let ones = UsageAccumulator {
            patches: vec![1.0; 12],
            heads: vec![1.0; 6],
            blocks: vec![1.0; 4],
        };
        assert_eq!(usage_loss(&ones, &budget), 0.75);
        let at = UsageAccumulator {
            patches: vec![0.5; 12],
            heads: vec![0.0, 1.0, 0.5, 0.5],
            blocks: vec![0.5; 4],
        };
        assert_eq!(usage_loss(&at, &budget), 0.0);
    }

    #[test]
    fn usage_loss_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let budget = BudgetConfig {
            gamma_p: 0.7,
            gamma_h: 0.3,
            gamma_b: 0.9,
            ..BudgetConfig::default()
        };
        for _ in 0..20 {
            let mut acc = UsageAccumulator::default();
            let mut v = |n: usize| (0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>();
            acc.patches = v(48);
            acc.heads = v(12);
            acc.blocks = v(6);
            let mut expected = 0.0;
            for (vals, g) in [(&acc.patches, 0.7), (&acc.heads, 0.3), (&acc.blocks, 0.9)] {
                let mut s = 0.0;
                for x in vals.iter() {
                    s += x;
                }
                let m = s / vals.len() as f64;
                expected += (m - g) * (m - g);
            }
            assert!((usage_loss(&acc, &budget) - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn coefficients_are_the_entry_gradient() {
        let budget = BudgetConfig::uniform(0.4);
        let mut acc = UsageAccumulator {
            patches: vec![0.2, 0.9, 0.6, 0.1],
            heads: vec![0.3, 0.8],
            blocks: vec![0.5, 0.7],
        };
        let c = usage_coefficients(acc.means(), &budget, 2, [2, 1, 1]);
        let base = usage_loss(&acc, &budget);
        let h = 1e-6;
        acc.patches[1] += h;
        let fd = (usage_loss(&acc, &budget) - base) / h;
        assert!((fd - c[0]).abs() < 1e-5);
    }

    #[test]
    fn entry_counts() {
        let c = ModelConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_heads: 2,
            num_blocks: 4,
            ffn_multiplier: 4,
            num_classes: 4,
        };
        assert_eq!(usage_entry_counts(&c), [48, 6, 6]);
    }

    #[test]
    fn budget_validation_and_annealing() {
        let mut b = BudgetConfig::uniform(0.5);
        b.validate().unwrap();
        b.gamma_h = 0.0;
        assert!(b.validate().unwrap_err().to_string().contains("budget.gamma_h"));
        let b = BudgetConfig {
            tau_final: Some(0.5),
            ..BudgetConfig::uniform(0.5)
        };
        assert_eq!(b.tau_at(0, 11), 5.0);
        assert!((b.tau_at(10, 11) - 0.5).abs() < 1e-12);
        assert_eq!(BudgetConfig::uniform(0.5).tau_at(7, 11), 5.0);
    }
}
