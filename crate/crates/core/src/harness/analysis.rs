use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{Dataset, Difficulty};
use crate::cost::policy_flops;
use crate::error::{DataError, Result};
use crate::model::ModelConfig;
use crate::objectives::SampleEval;
use crate::policy::{HeadSelectionMode, Policy, PolicyRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Kept fractions of one block over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockUsage {
    pub block: usize,
    pub patches: Summary,
    pub heads: Summary,
    pub msa: Summary,
    pub ffn: Summary,
}

/// FLOPs distribution of a group of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupFlops {
    pub kind: String,
    pub group: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStats {
    pub per_block: Vec<BlockUsage>,
    /// Grouped by label, then by difficulty.
    pub per_group: Vec<GroupFlops>,
    /// Mean over samples and blocks of kept patches and active heads, and
    /// mean executed blocks per sample.
    pub mean_patches: f64,
    pub mean_heads: f64,
    pub mean_blocks: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn group(kind: &str, name: String, mut values: Vec<f64>) -> GroupFlops {
    values.sort_by(f64::total_cmp);
    let s = Summary::of(&values);
    GroupFlops {
        kind: kind.into(),
        group: name,
        count: values.len(),
        mean: s.mean,
        std: s.std,
        min: values.first().copied().unwrap_or(f64::NAN),
        q25: quantile(&values, 0.25),
        median: quantile(&values, 0.5),
        q75: quantile(&values, 0.75),
        max: values.last().copied().unwrap_or(f64::NAN),
    }
}

fn frac(bits: &[bool]) -> f64 {
    bits.iter().filter(|&&b| b).count() as f64 / bits.len().max(1) as f64
}

/// Statistics over per-sample policies with their FLOPs.
pub fn policy_stats(
    policies: &[&Policy],
    flops: &[f64],
    labels: &[usize],
    difficulty: &[Difficulty],
    num_classes: usize,
) -> PolicyStats {
    let blocks = policies.first().map_or(0, |p| p.blocks.len());
    let per_block = (0..blocks)
        .map(|l| {
            let col = |f: &dyn Fn(&Policy) -> f64| -> Summary {
                Summary::of(&policies.iter().map(|p| f(p)).collect::<Vec<_>>())
            };
            BlockUsage {
                block: l,
                patches: col(&|p| frac(&p.blocks[l].patches)),
                heads: col(&|p| frac(&p.blocks[l].heads)),
                msa: col(&|p| f64::from(u8::from(p.blocks[l].msa))),
                ffn: col(&|p| f64::from(u8::from(p.blocks[l].ffn))),
            }
        })
        .collect();
    let mut per_group: Vec<GroupFlops> = (0..num_classes)
        .map(|c| {
            let v = flops
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(&f, _)| f)
                .collect();
            group("class", c.to_string(), v)
        })
        .collect();
    for d in [Difficulty::Easy, Difficulty::Hard, Difficulty::Unknown] {
        let v: Vec<f64> = flops
            .iter()
            .zip(difficulty)
            .filter(|(_, &x)| x == d)
            .map(|(&f, _)| f)
            .collect();
        if !v.is_empty() {
            per_group.push(group("difficulty", d.as_str().into(), v));
        }
    }
    let n = policies.len().max(1) as f64;
    let l = blocks.max(1) as f64;
    PolicyStats {
        per_block,
        per_group,
        mean_patches: policies
            .iter()
            .flat_map(|p| p.blocks.iter().map(|b| b.kept_patches() as f64))
            .sum::<f64>()
            / (n * l),
        mean_heads: policies
            .iter()
            .flat_map(|p| p.blocks.iter().map(|b| b.kept_heads() as f64))
            .sum::<f64>()
            / (n * l),
        mean_blocks: policies
            .iter()
            .flat_map(|p| p.blocks.iter().map(|b| f64::from(u8::from(b.msa) + u8::from(b.ffn)) / 2.0))
            .sum::<f64>()
            / n,
    }
}

impl PolicyStats {
    pub fn from_samples(samples: &[SampleEval], num_classes: usize) -> Self {
        let policies: Vec<&Policy> = samples.iter().map(|s| &s.policy).collect();
        let flops: Vec<f64> = samples.iter().map(|s| s.flops as f64).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let diff: Vec<Difficulty> = samples.iter().map(|s| s.difficulty).collect();
        policy_stats(&policies, &flops, &labels, &diff, num_classes)
    }

    pub fn group(&self, kind: &str, name: &str) -> Option<&GroupFlops> {
        self.per_group.iter().find(|g| g.kind == kind && g.group == name)
    }

    pub fn per_block_csv(&self) -> String {
        let mut s = String::from(
            "block,patches_mean,patches_std,heads_mean,heads_std,msa_mean,msa_std,ffn_mean,ffn_std\n",
        );
        for b in &self.per_block {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                b.block,
                b.patches.mean,
                b.patches.std,
                b.heads.mean,
                b.heads.std,
                b.msa.mean,
                b.msa.std,
                b.ffn.mean,
                b.ffn.std
            );
        }
        s
    }

    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("kind,group,count,mean_flops,std_flops,min,q25,median,q75,max\n");
        for g in &self.per_group {
            let _ = writeln!(
                s,
                "{},{},{},{:.1},{:.1},{:.1},{:.1},{:.1},{:.1},{:.1}",
                g.kind, g.group, g.count, g.mean, g.std, g.min, g.q25, g.median, g.q75, g.max
            );
        }
        s
    }
}

/// Per-sample, per-block patch-alive masks in raster order.
pub fn patch_masks_csv(records: &[PolicyRecord], data: &Dataset, num_patches: usize) -> String {
    let mut s = String::from("sample_id,label,difficulty,block");
    for j in 0..num_patches {
        let _ = write!(s, ",p{j}");
    }
    s.push('\n');
    for r in records {
        for (l, mask) in r.patches.iter().enumerate() {
            let _ = write!(
                s,
                "{},{},{},{}",
                r.sample_id,
                data.labels[r.sample_id],
                data.difficulty[r.sample_id].as_str(),
                l
            );
            for &bit in mask {
                let _ = write!(s, ",{bit}");
            }
            s.push('\n');
        }
    }
    s
}

/// Statistics from a policy dump; FLOPs are recomputed from each policy.
pub fn analyze_policies(
    records: &[PolicyRecord],
    data: &Dataset,
    config: &ModelConfig,
    head_mode: HeadSelectionMode,
) -> Result<PolicyStats> {
    if records.len() != data.len() {
        return Err(DataError::Mismatch(format!(
            "policy dump has {} records, dataset has {} samples",
            records.len(),
            data.len()
        ))
        .into());
    }
    let mut policies = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    let mut diff = Vec::with_capacity(records.len());
    for r in records {
        if r.sample_id >= data.len() {
            return Err(DataError::Mismatch(format!(
                "record for sample {} beyond dataset of {}",
                r.sample_id,
                data.len()
            ))
            .into());
        }
        let p = r.to_policy()?;
        p.validate(config)?;
        policies.push(p);
        labels.push(data.labels[r.sample_id]);
        diff.push(data.difficulty[r.sample_id]);
    }
    let flops = policies
        .iter()
        .map(|p| Ok(policy_flops(config, p, head_mode)?.total as f64))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Policy> = policies.iter().collect();
    Ok(policy_stats(&refs, &flops, &labels, &diff, data.num_classes))
}
