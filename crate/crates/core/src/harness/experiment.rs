//! End-to-end pipelines shared by the command line and the test suites.

use serde::{Deserialize, Serialize};

use super::{
    run_baseline, BaselineKind, BaselineSetup, BlockFractions, Dataset, MetricsRow, PolicyStats,
    RunConfig,
};
use crate::error::{ConfigError, Result};
use crate::exec::Exec;
use crate::model::{Model, Trainable};
use crate::objectives::{
    evaluate, train, BudgetConfig, EpochLog, EvalGates, EvalReport, GateMode, TrainConfig,
    TrainSpec,
};
use crate::policy::PolicyRecord;
use crate::rng::{stream, stream_seed, tag};

/// Seed salts of the training stages.
mod stage {
    pub const PRETRAIN: u64 = 101;
    pub const ADAPT: u64 = 102;
    pub const RANDOM_PLUS: u64 = 103;
    pub const RANDOM_EVAL: u64 = 104;
}

/// Receives `(stage, log)` after every epoch.
pub type EpochHook<'a> = &'a mut dyn FnMut(&str, &EpochLog);

pub fn init_model(cfg: &RunConfig) -> Model<f32> {
    Model::init(&cfg.model, &mut stream(cfg.seed, &[tag::INIT]))
}

fn run_stage(
    name: &str,
    model: &mut Model<f32>,
    data: &Dataset,
    spec: &TrainSpec<'_>,
    exec: &Exec,
    logs: &mut Vec<(String, EpochLog)>,
    hook: EpochHook<'_>,
) -> Result<()> {
    let stage_logs = train(model, data, spec, exec, |l| hook(name, l))?;
    logs.extend(stage_logs.into_iter().map(|l| (name.to_string(), l)));
    Ok(())
}

/// Gate-free training of the backbone.
pub fn pretrain(
    cfg: &RunConfig,
    schedule: &TrainConfig,
    model: &mut Model<f32>,
    data: &Dataset,
    exec: &Exec,
    logs: &mut Vec<(String, EpochLog)>,
    hook: EpochHook<'_>,
) -> Result<()> {
    let spec = TrainSpec {
        train: schedule,
        budget: &cfg.budget,
        head_mode: cfg.head_mode,
        gates: GateMode::Open,
        trainable: Trainable::Backbone,
        seed: stream_seed(cfg.seed, &[stage::PRETRAIN]),
    };
    run_stage("pretrain", model, data, &spec, exec, logs, hook)
}

/// Training with decision networks under the usage loss of `budget`.
pub fn adapt(
    cfg: &RunConfig,
    budget: &BudgetConfig,
    model: &mut Model<f32>,
    data: &Dataset,
    exec: &Exec,
    logs: &mut Vec<(String, EpochLog)>,
    hook: EpochHook<'_>,
) -> Result<()> {
    let spec = TrainSpec {
        train: &cfg.train,
        budget,
        head_mode: cfg.head_mode,
        gates: GateMode::Learned,
        trainable: if cfg.freeze_backbone {
            Trainable::Decision
        } else {
            Trainable::All
        },
        seed: stream_seed(cfg.seed, &[stage::ADAPT]),
    };
    run_stage("adapt", model, data, &spec, exec, logs, hook)
}

/// The trained backbone and the pretraining logs, or a fresh model when no
/// pretraining stage is configured.
fn backbone(
    cfg: &RunConfig,
    data: &Dataset,
    exec: &Exec,
    logs: &mut Vec<(String, EpochLog)>,
    hook: EpochHook<'_>,
) -> Result<Model<f32>> {
    let mut model = init_model(cfg);
    if let Some(schedule) = &cfg.pretrain {
        pretrain(cfg, schedule, &mut model, data, exec, logs, hook)?;
    }
    Ok(model)
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub model: Model<f32>,
    pub logs: Vec<(String, EpochLog)>,
    /// Learned-gate evaluation on the test split.
    pub report: EvalReport,
}

pub fn run_train(
    cfg: &RunConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    exec: &Exec,
    hook: EpochHook<'_>,
) -> Result<TrainedRun> {
    let mut logs = Vec::new();
    let mut model = backbone(cfg, train_data, exec, &mut logs, hook)?;
    adapt(cfg, &cfg.budget, &mut model, train_data, exec, &mut logs, hook)?;
    let report = evaluate(&model, test_data, EvalGates::Learned, cfg.head_mode, exec)?;
    Ok(TrainedRun {
        model,
        logs,
        report,
    })
}

pub fn policy_records(report: &EvalReport) -> Vec<PolicyRecord> {
    report
        .samples
        .iter()
        .map(|s| PolicyRecord::new(s.id, &s.policy))
        .collect()
}

pub fn metrics_row(run_id: impl Into<String>, gammas: [f64; 3], report: &EvalReport) -> MetricsRow {
    MetricsRow {
        run_id: run_id.into(),
        gamma_p: gammas[0],
        gamma_h: gammas[1],
        gamma_b: gammas[2],
        top1: report.top1,
        gflops: report.mean_gflops,
    }
}

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub gammas: [f64; 3],
    pub report: EvalReport,
}

/// One adaptive model per budget, all started from the same backbone.
/// Points are sorted by mean GFLOPs.
pub fn run_sweep(
    cfg: &RunConfig,
    budgets: &[[f64; 3]],
    train_data: &Dataset,
    test_data: &Dataset,
    exec: &Exec,
    hook: EpochHook<'_>,
) -> Result<(Vec<SweepPoint>, Vec<(String, EpochLog)>)> {
    let mut logs = Vec::new();
    let base = backbone(cfg, train_data, exec, &mut logs, hook)?;
    let mut points = Vec::with_capacity(budgets.len());
    for g in budgets {
        let budget = BudgetConfig {
            gamma_p: g[0],
            gamma_h: g[1],
            gamma_b: g[2],
            ..cfg.budget.clone()
        };
        let mut model = base.clone();
        adapt(cfg, &budget, &mut model, train_data, exec, &mut logs, hook)?;
        let report = evaluate(&model, test_data, EvalGates::Learned, cfg.head_mode, exec)?;
        points.push(SweepPoint { gammas: *g, report });
    }
    points.sort_by(|a, b| a.report.mean_flops.total_cmp(&b.report.mean_flops));
    Ok((points, logs))
}

pub fn sweep_run_id(g: [f64; 3]) -> String {
    format!("gamma_{}_{}_{}", g[0], g[1], g[2])
}

/// Per-block fractions actually realized by a set of policies.
pub fn measured_fractions(report: &EvalReport, num_classes: usize) -> BlockFractions {
    let stats = PolicyStats::from_samples(&report.samples, num_classes);
    BlockFractions {
        patches: stats.per_block.iter().map(|b| b.patches.mean).collect(),
        heads: stats.per_block.iter().map(|b| b.heads.mean).collect(),
        msa: stats.per_block.iter().map(|b| b.msa.mean).collect(),
        ffn: stats.per_block.iter().map(|b| b.ffn.mean).collect(),
    }
}

/// The adaptive model against its gate-free upper bound and random policies
/// with matched per-block fractions.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub backbone: Model<f32>,
    pub adaptive: Model<f32>,
    pub fractions: BlockFractions,
    pub upperbound: EvalReport,
    pub adavit: EvalReport,
    pub random: EvalReport,
    pub random_plus: EvalReport,
    pub logs: Vec<(String, EpochLog)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub fractions: BlockFractions,
    pub rows: Vec<MetricsRow>,
}

impl Comparison {
    pub fn rows(&self, gammas: [f64; 3]) -> Vec<MetricsRow> {
        vec![
            metrics_row(BaselineKind::Upperbound.as_str(), [1.0; 3], &self.upperbound),
            metrics_row("adavit", gammas, &self.adavit),
            metrics_row(BaselineKind::Random.as_str(), gammas, &self.random),
            metrics_row(BaselineKind::RandomPlus.as_str(), gammas, &self.random_plus),
        ]
    }
}

pub fn run_comparison(
    cfg: &RunConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    exec: &Exec,
    hook: EpochHook<'_>,
) -> Result<Comparison> {
    let Some(schedule) = &cfg.pretrain else {
        return Err(ConfigError::field("pretrain", "baselines need a gate-free pretraining stage").into());
    };
    let Some(baseline) = &cfg.baseline else {
        return Err(ConfigError::field("baseline", "missing baseline settings").into());
    };
    let mut logs = Vec::new();
    let mut base = init_model(cfg);
    pretrain(cfg, schedule, &mut base, train_data, exec, &mut logs, hook)?;
    let mut adaptive = base.clone();
    adapt(cfg, &cfg.budget, &mut adaptive, train_data, exec, &mut logs, hook)?;
    let adavit = evaluate(&adaptive, test_data, EvalGates::Learned, cfg.head_mode, exec)?;
    let fractions = match &baseline.fractions {
        Some(f) => f.clone(),
        None => measured_fractions(&adavit, cfg.model.num_classes),
    };
    let setup = BaselineSetup {
        backbone: &base,
        train_data,
        test_data,
        fractions: &fractions,
        finetune: &baseline.finetune,
        head_mode: cfg.head_mode,
        seed: stream_seed(cfg.seed, &[stage::RANDOM_EVAL]),
    };
    let upperbound = run_baseline(BaselineKind::Upperbound, &setup, exec)?.report;
    let random = run_baseline(BaselineKind::Random, &setup, exec)?.report;
    let plus_setup = BaselineSetup {
        seed: stream_seed(cfg.seed, &[stage::RANDOM_PLUS]),
        ..setup
    };
    let random_plus = run_baseline(BaselineKind::RandomPlus, &plus_setup, exec)?.report;
    Ok(Comparison {
        backbone: base,
        adaptive,
        fractions,
        upperbound,
        adavit,
        random,
        random_plus,
        logs,
    })
}
