//! Usage policies: keep-probabilities, sampled gates and realized hard
//! policies for patches, attention heads and block sublayers.

pub mod gumbel;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gumbel::{gumbel_softmax_binary, GumbelNoise};

use crate::model::ModelConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("keep-probability must lie in (0, 1), got {0}")]
    Probability(f64),
    #[error("gate value {value} in block {block} is not binary")]
    NotBinary { block: usize, value: f64 },
    #[error("policy shape mismatch: {0}")]
    Shape(String),
}

/// How a deactivated attention head is realized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadSelectionMode {
    /// Attention map replaced by the identity; the value projection passes through.
    Partial,
    /// Head output removed before the output projection.
    #[default]
    Full,
}

/// Per-block keep-probabilities from a decision network.
#[derive(Clone, Debug, PartialEq)]
pub struct GateProbabilities {
    pub patches: Vec<f64>,
    pub heads: Vec<f64>,
    /// `[msa, ffn]`.
    pub block: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Eval,
}

/// Realized gates for one block. Values are hard `{0, 1}` in eval mode and
/// relaxed in `(0, 1)` during training (hard when straight-through is on).
#[derive(Clone, Debug, PartialEq)]
pub struct GateDecisions {
    pub patches: Vec<f64>,
    pub heads: Vec<f64>,
    pub block: [f64; 2],
    /// Relaxed values backing the straight-through path (equal to the
    /// values above when straight-through is off or in eval mode).
    pub relaxed_patches: Vec<f64>,
    pub relaxed_heads: Vec<f64>,
    pub relaxed_block: [f64; 2],
    /// Cumulative patch-alive mask after this block's selection.
    pub alive: Vec<bool>,
}

/// `G_keep − G_drop` for `n` gates, drawn in order.
pub fn draw_noise_diffs(n: usize, noise: &mut GumbelNoise) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let keep = noise.gumbel();
            let drop = noise.gumbel();
            keep - drop
        })
        .collect()
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Samples gates from keep-probabilities.
///
/// Eval mode thresholds deterministically (`keep ⇔ p ≥ 0.5`) and draws no
/// noise. Train mode draws a binary Gumbel-Softmax sample per gate, in the
/// order patches, heads, block. `prev_alive` is the cumulative mask entering
/// the block; dropped patches never come back.
pub fn sample_gates(
    probs: &GateProbabilities,
    prev_alive: &[bool],
    tau: f64,
    mode: SampleMode,
    straight_through: bool,
    noise: &mut GumbelNoise,
) -> Result<GateDecisions, PolicyError> {
    if prev_alive.len() != probs.patches.len() {
        return Err(PolicyError::Shape(format!(
            "{} patch probabilities for an alive mask of {}",
            probs.patches.len(),
            prev_alive.len()
        )));
    }
    if !(tau > 0.0) {
        return Err(PolicyError::Temperature(tau));
    }
    let all = probs
        .patches
        .iter()
        .chain(&probs.heads)
        .chain(&probs.block);
    if let Some(&p) = all.clone().find(|&&p| !(p > 0.0 && p < 1.0)) {
        return Err(PolicyError::Probability(p));
    }
    let (relaxed, forward): (Vec<f64>, Vec<f64>) = match mode {
        SampleMode::Eval => {
            let hard: Vec<f64> = all.map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect();
            (hard.clone(), hard)
        }
        SampleMode::Train => {
            let ps: Vec<f64> = all.copied().collect();
            let diffs = draw_noise_diffs(ps.len(), noise);
            let relaxed: Vec<f64> = ps
                .iter()
                .zip(&diffs)
                .map(|(&p, &d)| gumbel::relaxed_keep_from_logit(logit(p), tau, d))
                .collect();
            let forward = if straight_through {
                relaxed.iter().map(|&r| if r >= 0.5 { 1.0 } else { 0.0 }).collect()
            } else {
                relaxed.clone()
            };
            (relaxed, forward)
        }
    };
    let n = probs.patches.len();
    let h = probs.heads.len();
    let alive = prev_alive
        .iter()
        .zip(&forward[..n])
        .map(|(&a, &g)| a && g >= 0.5)
        .collect();
    Ok(GateDecisions {
        patches: forward[..n].to_vec(),
        heads: forward[n..n + h].to_vec(),
        block: [forward[n + h], forward[n + h + 1]],
        relaxed_patches: relaxed[..n].to_vec(),
        relaxed_heads: relaxed[n..n + h].to_vec(),
        relaxed_block: [relaxed[n + h], relaxed[n + h + 1]],
        alive,
    })
}

/// Hard usage policy of one block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPolicy {
    /// Patch-alive bits after this block's selection (class token excluded).
    pub patches: Vec<bool>,
    pub heads: Vec<bool>,
    pub msa: bool,
    pub ffn: bool,
}

impl BlockPolicy {
    pub fn open(config: &ModelConfig) -> Self {
        Self {
            patches: vec![true; config.num_patches()],
            heads: vec![true; config.num_heads],
            msa: true,
            ffn: true,
        }
    }

    /// Builds a block policy from gate values, rejecting anything non-binary.
    pub fn from_values(
        block: usize,
        patches: &[f64],
        heads: &[f64],
        sublayers: [f64; 2],
    ) -> Result<Self, PolicyError> {
        let bit = |v: f64| {
            if v == 1.0 {
                Ok(true)
            } else if v == 0.0 {
                Ok(false)
            } else {
                Err(PolicyError::NotBinary { block, value: v })
            }
        };
        Ok(Self {
            patches: patches.iter().map(|&v| bit(v)).collect::<Result<_, _>>()?,
            heads: heads.iter().map(|&v| bit(v)).collect::<Result<_, _>>()?,
            msa: bit(sublayers[0])?,
            ffn: bit(sublayers[1])?,
        })
    }

    pub fn kept_patches(&self) -> usize {
        self.patches.iter().filter(|&&b| b).count()
    }

    pub fn kept_heads(&self) -> usize {
        self.heads.iter().filter(|&&b| b).count()
    }
}

/// Hard usage policy for a whole forward pass, one entry per block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub blocks: Vec<BlockPolicy>,
}

impl Policy {
    pub fn open(config: &ModelConfig) -> Self {
        Self {
            blocks: vec![BlockPolicy::open(config); config.num_blocks],
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), PolicyError> {
        if self.blocks.len() != config.num_blocks {
            return Err(PolicyError::Shape(format!(
                "{} block policies for {} blocks",
                self.blocks.len(),
                config.num_blocks
            )));
        }
        for (l, b) in self.blocks.iter().enumerate() {
            if b.patches.len() != config.num_patches() || b.heads.len() != config.num_heads {
                return Err(PolicyError::Shape(format!(
                    "block {l}: {} patches / {} heads, expected {} / {}",
                    b.patches.len(),
                    b.heads.len(),
                    config.num_patches(),
                    config.num_heads
                )));
            }
        }
        Ok(())
    }

    /// Makes the patch masks cumulative: once dropped, a patch stays dropped.
    pub fn make_monotone(&mut self) {
        for l in 1..self.blocks.len() {
            let (prev, rest) = self.blocks.split_at_mut(l);
            let prev = &prev[l - 1].patches;
            for (cur, &p) in rest[0].patches.iter_mut().zip(prev) {
                *cur = *cur && p;
            }
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.blocks.windows(2).all(|w| {
            w[1].patches
                .iter()
                .zip(&w[0].patches)
                .all(|(&next, &prev)| !next || prev)
        })
    }
}

/// One line of a policy dump: hard gate bits per block for one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub sample_id: usize,
    pub patches: Vec<Vec<u8>>,
    pub heads: Vec<Vec<u8>>,
    pub blocks: Vec<[u8; 2]>,
}

impl PolicyRecord {
    pub fn new(sample_id: usize, policy: &Policy) -> Self {
        let bits = |v: &[bool]| v.iter().map(|&b| u8::from(b)).collect();
        Self {
            sample_id,
            patches: policy.blocks.iter().map(|b| bits(&b.patches)).collect(),
            heads: policy.blocks.iter().map(|b| bits(&b.heads)).collect(),
            blocks: policy
                .blocks
                .iter()
                .map(|b| [u8::from(b.msa), u8::from(b.ffn)])
                .collect(),
        }
    }

    pub fn to_policy(&self) -> Result<Policy, PolicyError> {
        let bit = |v: u8| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(PolicyError::NotBinary {
                block: 0,
                value: f64::from(other),
            }),
        };
        let blocks = self
            .patches
            .iter()
            .zip(&self.heads)
            .zip(&self.blocks)
            .map(|((p, h), b)| {
                Ok(BlockPolicy {
                    patches: p.iter().map(|&v| bit(v)).collect::<Result<_, _>>()?,
                    heads: h.iter().map(|&v| bit(v)).collect::<Result<_, _>>()?,
                    msa: bit(b[0])?,
                    ffn: bit(b[1])?,
                })
            })
            .collect::<Result<Vec<_>, PolicyError>>()?;
        if blocks.len() != self.patches.len() || blocks.len() != self.heads.len() {
            return Err(PolicyError::Shape("ragged policy record".into()));
        }
        Ok(Policy { blocks })
    }
}
