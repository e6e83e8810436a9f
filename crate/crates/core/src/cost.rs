//! Analytic FLOPs accounting for a config and a realized hard policy.
//!
//! Conventions: a multiply-accumulate is 2 FLOPs, a bias or residual add is
//! 1 per element, softmax 3, layernorm 5, GELU 8 and sigmoid 4 per element.
//! Dropped patches, closed heads and skipped sublayers are priced as if
//! physically removed, which is what a shape-dynamic implementation runs.

use serde::{Deserialize, Serialize};

use crate::model::ModelConfig;
use crate::policy::{HeadSelectionMode, Policy, PolicyError};

pub const SOFTMAX_FLOPS: u64 = 3;
pub const LAYERNORM_FLOPS: u64 = 5;
pub const GELU_FLOPS: u64 = 8;
pub const SIGMOID_FLOPS: u64 = 4;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    /// Tokens (class token included) processed by the block's sublayers.
    pub tokens: usize,
    pub active_heads: usize,
    pub msa: bool,
    pub ffn: bool,
    /// Pre-attention layernorm plus Q/K/V projections.
    pub qkv_proj: u64,
    /// `QKᵀ`, scaling and softmax.
    pub attn_logits: u64,
    pub attn_apply: u64,
    /// Output projection plus the attention residual.
    pub out_proj: u64,
    /// Pre-FFN layernorm, both layers, GELU and residual.
    pub ffn_flops: u64,
    pub decision_net: u64,
}

impl BlockCost {
    pub fn total(&self) -> u64 {
        self.qkv_proj
            + self.attn_logits
            + self.attn_apply
            + self.out_proj
            + self.ffn_flops
            + self.decision_net
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub embed: u64,
    pub blocks: Vec<BlockCost>,
    pub classifier: u64,
    pub total: u64,
    pub gflops: f64,
    /// Mean over blocks of patches kept (class token excluded).
    pub mean_patches: f64,
    /// Mean over blocks of active heads.
    pub mean_heads: f64,
    /// Executed sublayers divided by two, summed over blocks.
    pub blocks_executed: f64,
}

impl CostReport {
    fn finish(config: &ModelConfig, embed: u64, blocks: Vec<BlockCost>) -> Self {
        let classifier = 2 * (config.embed_dim * config.num_classes) as u64;
        let total = embed + classifier + blocks.iter().map(BlockCost::total).sum::<u64>();
        let l = blocks.len() as f64;
        Self {
            embed,
            classifier,
            total,
            gflops: total as f64 / 1e9,
            mean_patches: blocks.iter().map(|b| (b.tokens - 1) as f64).sum::<f64>() / l,
            mean_heads: blocks.iter().map(|b| b.active_heads as f64).sum::<f64>() / l,
            blocks_executed: blocks
                .iter()
                .map(|b| (u8::from(b.msa) + u8::from(b.ffn)) as f64 / 2.0)
                .sum(),
            blocks,
        }
    }

    /// The same pass with decision networks not charged, as when a policy
    /// is supplied from outside the model.
    pub fn without_decision(mut self) -> Self {
        let removed: u64 = self.blocks.iter().map(|b| b.decision_net).sum();
        self.blocks.iter_mut().for_each(|b| b.decision_net = 0);
        self.total -= removed;
        self.gflops = self.total as f64 / 1e9;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("cost report serializes")
    }

    /// Plain-text per-block table.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>5} {:>6} {:>5} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>14}\n",
            "block", "tokens", "heads", "qkv_proj", "attn_logits", "attn_apply", "out_proj", "ffn",
            "decision_net", "total"
        );
        s += &format!("{:>5} {:>6} {:>5} {:>92} {:>14}\n", "embed", "", "", "", self.embed);
        for (l, b) in self.blocks.iter().enumerate() {
            s += &format!(
                "{:>5} {:>6} {:>5} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12} {:>14}\n",
                l,
                b.tokens,
                b.active_heads,
                b.qkv_proj,
                b.attn_logits,
                b.attn_apply,
                b.out_proj,
                b.ffn_flops,
                b.decision_net,
                b.total()
            );
        }
        s += &format!("{:>5} {:>6} {:>5} {:>92} {:>14}\n", "cls", "", "", "", self.classifier);
        s += &format!("total {} FLOPs ({:.3} GFLOPs)\n", self.total, self.gflops);
        s
    }
}

fn embed_flops(c: &ModelConfig) -> u64 {
    let (n, d, pd) = (c.num_patches() as u64, c.embed_dim as u64, c.patch_dim() as u64);
    n * (2 * pd * d + d) + (n + 1) * d
}

/// Cost of one decision network given how many patches are still alive.
pub fn decision_flops(c: &ModelConfig, alive_patches: usize) -> u64 {
    let d = c.embed_dim as u64;
    let per_output = 2 * d + 1 + SIGMOID_FLOPS;
    (alive_patches as u64 + c.num_heads as u64 + 2) * per_output
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum HeadState {
    Active,
    /// Value projection only (partial deactivation).
    Identity,
    Removed,
}

fn block_flops(c: &ModelConfig, tokens: usize, heads: &[HeadState], msa: bool, ffn: bool) -> BlockCost {
    let n = tokens as u64;
    let d = c.embed_dim as u64;
    let dk = c.head_dim() as u64;
    let f = c.ffn_hidden() as u64;
    let active = heads.iter().filter(|&&h| h == HeadState::Active).count() as u64;
    let identity = heads.iter().filter(|&&h| h == HeadState::Identity).count() as u64;
    let contributing = active + identity;
    let mut cost = BlockCost {
        tokens,
        active_heads: active as usize,
        msa,
        ffn,
        ..Default::default()
    };
    if msa && contributing > 0 {
        cost.qkv_proj = LAYERNORM_FLOPS * n * d + active * 3 * 2 * n * d * dk + identity * 2 * n * d * dk;
        cost.attn_logits = active * (2 * n * n * dk + n * n + SOFTMAX_FLOPS * n * n);
        cost.attn_apply = active * 2 * n * n * dk;
        cost.out_proj = 2 * n * (contributing * dk) * d + n * d;
    }
    if ffn {
        cost.ffn_flops = LAYERNORM_FLOPS * n * d
            + n * (2 * d * f + f)
            + GELU_FLOPS * n * f
            + n * (2 * f * d + d)
            + n * d;
    }
    cost
}

/// FLOPs with every patch, head and sublayer active and no decision networks.
pub fn static_flops(config: &ModelConfig) -> CostReport {
    let heads = vec![HeadState::Active; config.num_heads];
    let blocks = (0..config.num_blocks)
        .map(|_| block_flops(config, config.num_tokens(), &heads, true, true))
        .collect();
    CostReport::finish(config, embed_flops(config), blocks)
}

/// FLOPs of one forward pass under a hard policy, decision networks included.
///
/// Patch bits are treated cumulatively, so a patch dropped in an earlier
/// block stays dropped whatever later blocks say.
pub fn policy_flops(
    config: &ModelConfig,
    policy: &Policy,
    mode: HeadSelectionMode,
) -> Result<CostReport, PolicyError> {
    policy.validate(config)?;
    let mut alive = vec![true; config.num_patches()];
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for (l, bp) in policy.blocks.iter().enumerate() {
        let entering = alive.iter().filter(|&&a| a).count();
        for (a, &keep) in alive.iter_mut().zip(&bp.patches) {
            *a = *a && keep;
        }
        let tokens = alive.iter().filter(|&&a| a).count() + 1;
        let heads: Vec<HeadState> = bp
            .heads
            .iter()
            .map(|&on| match (on, mode) {
                (true, _) => HeadState::Active,
                (false, HeadSelectionMode::Partial) => HeadState::Identity,
                (false, HeadSelectionMode::Full) => HeadState::Removed,
            })
            .collect();
        let mut cost = block_flops(config, tokens, &heads, bp.msa, bp.ffn);
        if config.has_decision(l) {
            cost.decision_net = decision_flops(config, entering);
        }
        blocks.push(cost);
    }
    Ok(CostReport::finish(config, embed_flops(config), blocks))
}
