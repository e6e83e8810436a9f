//! Op-counting cost simulator shared by the oracle and acceptance suites.

use adavit::model::ModelConfig;
use adavit::policy::{BlockPolicy, HeadSelectionMode, Policy};

pub fn micro() -> ModelConfig {
    ModelConfig {
        image_size: 4,
        patch_size: 2,
        channels: 1,
        embed_dim: 4,
        num_heads: 2,
        num_blocks: 2,
        ffn_multiplier: 4,
        num_classes: 3,
    }
}

/// Counts operations by iterating the loops a naive implementation runs.
struct Counter(u64);

impl Counter {
    fn matmul(&mut self, rows: usize, inner: usize, cols: usize) {
        for _ in 0..rows {
            for _ in 0..cols {
                for _ in 0..inner {
                    self.0 += 2; // multiply + accumulate
                }
            }
        }
    }

    fn elementwise(&mut self, rows: usize, cols: usize, per_element: u64) {
        for _ in 0..rows {
            for _ in 0..cols {
                self.0 += per_element;
            }
        }
    }
}

pub fn simulate(c: &ModelConfig, policy: &Policy, mode: HeadSelectionMode) -> u64 {
    let (d, dk, f) = (c.embed_dim, c.head_dim(), c.ffn_hidden());
    let mut ops = Counter(0);
    // Patch embedding: projection, bias, class token prepend, positions.
    ops.matmul(c.num_patches(), c.patch_dim(), d);
    ops.elementwise(c.num_patches(), d, 1);
    ops.elementwise(c.num_tokens(), d, 1);

    let mut alive: Vec<usize> = (0..c.num_patches()).collect();
    for (l, bp) in policy.blocks.iter().enumerate() {
        if l >= 1 {
            // Decision heads read every surviving patch row plus the class row.
            for _ in &alive {
                ops.matmul(1, d, 1);
                ops.elementwise(1, 1, 1 + 4);
            }
            ops.matmul(1, d, c.num_heads);
            ops.elementwise(1, c.num_heads, 1 + 4);
            ops.matmul(1, d, 2);
            ops.elementwise(1, 2, 1 + 4);
        }
        alive.retain(|&j| bp.patches[j]);
        let n = alive.len() + 1;

        let running: Vec<bool> = bp.heads.clone();
        let contributing = running
            .iter()
            .filter(|&&on| on || mode == HeadSelectionMode::Partial)
            .count();
        if bp.msa && contributing > 0 {
            ops.elementwise(n, d, 5);
            for &on in &running {
                if on {
                    ops.matmul(n, d, dk); // Q
                    ops.matmul(n, d, dk); // K
                    ops.matmul(n, d, dk); // V
                    ops.matmul(n, dk, n); // logits
                    ops.elementwise(n, n, 1); // scale
                    ops.elementwise(n, n, 3); // softmax
                    ops.matmul(n, n, dk); // apply
                } else if mode == HeadSelectionMode::Partial {
                    ops.matmul(n, d, dk); // V passes through
                }
            }
            ops.matmul(n, contributing * dk, d);
            ops.elementwise(n, d, 1); // residual
        }
        if bp.ffn {
            ops.elementwise(n, d, 5);
            ops.matmul(n, d, f);
            ops.elementwise(n, f, 1);
            ops.elementwise(n, f, 8);
            ops.matmul(n, f, d);
            ops.elementwise(n, d, 1);
            ops.elementwise(n, d, 1); // residual
        }
    }
    ops.matmul(1, d, c.num_classes);
    ops.0
}

pub fn policy_from_bits(c: &ModelConfig, bits: u32) -> Policy {
    let per_block = c.num_patches() + c.num_heads + 2;
    let blocks = (0..c.num_blocks)
        .map(|l| {
            let b = |i: usize| bits >> (l * per_block + i) & 1 == 1;
            let n = c.num_patches();
            BlockPolicy {
                patches: (0..n).map(b).collect(),
                heads: (0..c.num_heads).map(|h| b(n + h)).collect(),
                msa: b(n + c.num_heads),
                ffn: b(n + c.num_heads + 1),
            }
        })
        .collect();
    Policy { blocks }
}
