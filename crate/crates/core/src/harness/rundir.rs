use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{patch_masks_csv, Dataset, PolicyStats, RunConfig};
use crate::error::{Error, Result};
use crate::model::{checkpoint, Model};
use crate::objectives::EpochLog;
use crate::policy::PolicyRecord;

pub const CONFIG: &str = "config.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS: &str = "metrics.csv";
pub const POLICIES: &str = "policies.jsonl";
pub const PER_BLOCK: &str = "stats/per_block.csv";
pub const PER_CLASS: &str = "stats/per_class.csv";
pub const PATCH_MASKS: &str = "stats/patch_masks.csv";

/// A run output directory. Creating one never touches an existing
/// directory unless `overwrite` is set.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

fn is_empty_dir(path: &Path) -> Result<bool> {
    Ok(fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .next()
        .is_none())
}

impl RunDir {
    /// With `overwrite`, an existing run directory (one holding a
    /// `config.json`) is replaced; any other non-empty path is refused.
    pub fn create(path: &Path, overwrite: bool) -> Result<Self> {
        if path.exists() {
            let empty = path.is_dir() && is_empty_dir(path)?;
            if !empty {
                if !overwrite {
                    return Err(Error::RunDirExists {
                        path: path.to_path_buf(),
                    });
                }
                if !path.join(CONFIG).is_file() {
                    return Err(Error::Format(format!(
                        "refusing to overwrite {}: not a run directory",
                        path.display()
                    )));
                }
                fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
            }
        }
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            root: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<()> {
        self.write(CONFIG, config.to_json() + "\n")
    }

    pub fn write_checkpoint(&self, model: &Model<f32>) -> Result<()> {
        checkpoint::save(model, &self.root.join(CHECKPOINT))?;
        Ok(())
    }

    pub fn write_train_log(&self, logs: &[(String, EpochLog)]) -> Result<()> {
        self.write(TRAIN_LOG, train_log_jsonl(logs))
    }

    pub fn write_metrics(&self, rows: &[MetricsRow]) -> Result<()> {
        self.write(METRICS, metrics_csv(rows))
    }

    pub fn write_policies(&self, records: &[PolicyRecord]) -> Result<()> {
        self.write(POLICIES, policies_jsonl(records))
    }

    pub fn write_stats(&self, stats: &PolicyStats, records: &[PolicyRecord], data: &Dataset, num_patches: usize) -> Result<()> {
        self.write(PER_BLOCK, stats.per_block_csv())?;
        self.write(PER_CLASS, stats.per_class_csv())?;
        self.write(PATCH_MASKS, patch_masks_csv(records, data, num_patches))
    }
}

/// Formats `x` with three significant digits in plain notation.
pub fn sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (2 - magnitude).max(0) as usize;
    // Rounding can carry into a new digit (9.995 -> 10.0); re-derive then.
    let s = format!("{x:.decimals$}");
    let carried: f64 = s.parse().unwrap_or(x);
    let m2 = carried.abs().log10().floor() as i32;
    if m2 != magnitude {
        let decimals = (2 - m2).max(0) as usize;
        return format!("{carried:.decimals$}");
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub gamma_p: f64,
    pub gamma_h: f64,
    pub gamma_b: f64,
    pub top1: f64,
    pub gflops: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("run_id,gamma_p,gamma_h,gamma_b,top1,gflops\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.4},{}",
            r.run_id,
            r.gamma_p,
            r.gamma_h,
            r.gamma_b,
            r.top1,
            sig3(r.gflops)
        );
    }
    s
}

#[derive(Serialize)]
struct LogLine<'a> {
    stage: &'a str,
    #[serde(flatten)]
    log: &'a EpochLog,
}

pub fn train_log_jsonl(logs: &[(String, EpochLog)]) -> String {
    logs.iter()
        .map(|(stage, log)| serde_json::to_string(&LogLine { stage, log }).expect("log serializes") + "\n")
        .collect()
}

pub fn policies_jsonl(records: &[PolicyRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

pub fn parse_policies_jsonl(text: &str, path: &Path) -> Result<Vec<PolicyRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
