use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{generate_synthetic, load_image_folder, BlockFractions, Dataset, SyntheticTaskSpec};
use crate::error::{ConfigError, Result};
use crate::model::ModelConfig;
use crate::objectives::{BudgetConfig, TrainConfig};
use crate::policy::HeadSelectionMode;
use crate::rng::{stream, stream_seed, tag};

fn default_train_fraction() -> f64 {
    0.75
}

/// Exactly one of `synthetic` or `folder` must be set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticTaskSpec>,
    /// Root of `<class>/<image>` folders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folder: Option<PathBuf>,
    /// Share of samples used for training; the rest is the test split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

/// Settings for the random-policy baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    /// Finetuning schedule of the backbone under random policies.
    pub finetune: TrainConfig,
    /// Explicit per-block fractions; by default they are measured from the
    /// adaptive model's test-set policies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fractions: Option<BlockFractions>,
}

/// Usage targets for a budget sweep, as `[gamma_p, gamma_h, gamma_b]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub budgets: Vec<[f64; 3]>,
}

fn default_threads() -> usize {
    1
}

/// Everything a run needs. Unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    /// Gate-free training of the backbone before the adaptive stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<TrainConfig>,
    /// Adaptive stage with decision networks and the usage loss.
    pub train: TrainConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub head_mode: HeadSelectionMode,
    /// Train only the decision networks in the adaptive stage.
    #[serde(default)]
    pub freeze_backbone: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        if let Some(p) = &self.pretrain {
            p.validate()?;
        }
        self.budget.validate()?;
        let d = &self.data;
        match (&d.synthetic, &d.folder) {
            (Some(s), None) => {
                s.validate()?;
                if s.image_size != self.model.image_size {
                    return Err(ConfigError::field(
                        "data.synthetic.image_size",
                        format!("{} differs from model.image_size {}", s.image_size, self.model.image_size),
                    ));
                }
                if self.model.channels != 1 {
                    return Err(ConfigError::field("model.channels", "synthetic data has one channel"));
                }
                if s.num_classes != self.model.num_classes {
                    return Err(ConfigError::field(
                        "data.synthetic.num_classes",
                        format!("{} differs from model.num_classes {}", s.num_classes, self.model.num_classes),
                    ));
                }
            }
            (None, Some(_)) => {}
            _ => {
                return Err(ConfigError::field(
                    "data",
                    "set exactly one of `synthetic` or `folder`",
                ))
            }
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(ConfigError::field("data.train_fraction", "must lie in (0, 1)"));
        }
        if let Some(b) = &self.baseline {
            b.finetune.validate()?;
            if let Some(f) = &b.fractions {
                f.validate(&self.model)?;
            }
        }
        if let Some(s) = &self.sweep {
            if s.budgets.is_empty() {
                return Err(ConfigError::field("sweep.budgets", "must not be empty"));
            }
            for g in &s.budgets {
                BudgetConfig {
                    gamma_p: g[0],
                    gamma_h: g[1],
                    gamma_b: g[2],
                    ..self.budget.clone()
                }
                .validate()
                .map_err(|e| ConfigError::field("sweep.budgets", e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Applies the output-directory and thread-count overrides.
    pub fn with_overrides(mut self, out: Option<PathBuf>, threads: Option<usize>) -> Self {
        if out.is_some() {
            self.output_dir = out;
        }
        if let Some(t) = threads {
            self.threads = t;
        }
        self
    }

    /// Train and test splits. Synthetic data is generated from the run seed;
    /// folder data is shuffled with it before splitting.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let all = match (&d.synthetic, &d.folder) {
            (Some(spec), _) => generate_synthetic(spec, stream_seed(self.seed, &[tag::DATA]))?,
            (None, Some(root)) => {
                let (all, _) = load_image_folder(root, self.model.image_size, self.model.channels)?;
                if all.num_classes != self.model.num_classes {
                    return Err(ConfigError::field(
                        "model.num_classes",
                        format!("{} class folders found under {}", all.num_classes, root.display()),
                    )
                    .into());
                }
                let mut order: Vec<usize> = (0..all.len()).collect();
                order.shuffle(&mut stream(self.seed, &[tag::SPLIT]));
                all.subset(&order, "all")
            }
            (None, None) => unreachable!("validated"),
        };
        let n_train = ((all.len() as f64) * d.train_fraction).round() as usize;
        let n_train = n_train.clamp(1, all.len().saturating_sub(1).max(1));
        let (train, test) = all.split_at(n_train);
        if test.is_empty() {
            return Err(crate::error::DataError::Empty.into());
        }
        Ok((train, test))
    }
}
