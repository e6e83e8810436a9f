use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adavit::cost::{policy_flops, static_flops};
use adavit::error::{ConfigError, DataError, Error};
use adavit::exec::Exec;
use adavit::harness::experiment::{
    metrics_row, policy_records, run_comparison, run_sweep, run_train, sweep_run_id,
};
use adavit::harness::rundir::{parse_policies_jsonl, CONFIG, POLICIES};
use adavit::harness::{analyze_policies, welch_t_test, Dataset, PolicyStats, RunConfig, RunDir};
use adavit::model::{checkpoint, CheckpointError};
use adavit::objectives::{evaluate, EpochLog, EvalGates, EvalReport};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "adavit", version, about = "Adaptive vision transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output run directory.
    #[arg(long, env = "ADAVIT_OUT_DIR")]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = "ADAVIT_THREADS")]
    threads: Option<usize>,
    /// Replace an existing run directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gates {
    Learned,
    Open,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (optional gate-free stage, then the adaptive stage).
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "learned")]
        gates: Gates,
    },
    /// Print the FLOPs breakdown of the configured model.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Price the policies of a `policies.jsonl` dump instead.
        #[arg(long)]
        policies: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// One adaptive model per configured budget.
    Sweep(Common),
    /// Policy statistics of an existing run.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Run directory holding `config.json` and `policies.jsonl`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Upperbound, adaptive, Random and Random+ at matched fractions.
    Baseline(Common),
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Data(_) | Error::RunDirExists { .. } => 2,
        Error::Checkpoint(CheckpointError::Missing { .. }) => 2,
        Error::NonFinite { .. } => 3,
        Error::Checkpoint(CheckpointError::Corrupt { .. }) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig, Error> {
    let path = common
        .config
        .as_deref()
        .or(fallback)
        .ok_or_else(|| ConfigError::field("--config", "required"))?;
    let mut cfg = RunConfig::load(path)?.with_overrides(common.out.clone(), common.threads);
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run_dir(common: &Common, cfg: &RunConfig) -> Result<RunDir, Error> {
    let out = cfg
        .output_dir
        .as_deref()
        .ok_or_else(|| ConfigError::field("--out", "no output directory given"))?;
    RunDir::create(out, common.overwrite)
}

fn progress(stage: &str, log: &EpochLog) {
    let usage = match (log.usage_patches, log.usage_heads, log.usage_blocks) {
        (Some(p), Some(h), Some(b)) => format!(" usage {p:.3}/{h:.3}/{b:.3}"),
        _ => String::new(),
    };
    eprintln!(
        "[{stage}] epoch {:>3} ce {:.4} usage_loss {:.4} top1 {:.4}{usage}",
        log.epoch, log.l_ce, log.l_usage, log.top1
    );
}

fn write_eval(dir: &RunDir, report: &EvalReport, test: &Dataset, cfg: &RunConfig) -> Result<(), Error> {
    let records = policy_records(report);
    dir.write_policies(&records)?;
    let stats = PolicyStats::from_samples(&report.samples, cfg.model.num_classes);
    dir.write_stats(&stats, &records, test, cfg.model.num_patches())
}

fn summary(report: &EvalReport) -> serde_json::Value {
    json!({
        "top1": report.top1,
        "mean_flops": report.mean_flops,
        "gflops": report.mean_gflops,
        "usage": report.usage,
    })
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train(common) => {
            let cfg = load_config(&common, None)?;
            let dir = run_dir(&common, &cfg)?;
            dir.write_config(&cfg)?;
            let (train, test) = cfg.load_data()?;
            let exec = Exec::new(cfg.threads);
            let outcome = run_train(&cfg, &train, &test, &exec, &mut progress)?;
            dir.write_checkpoint(&outcome.model)?;
            dir.write_train_log(&outcome.logs)?;
            dir.write_metrics(&[metrics_row("adavit", cfg.budget.gammas(), &outcome.report)])?;
            write_eval(&dir, &outcome.report, &test, &cfg)?;
            println!("{}", summary(&outcome.report));
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
            gates,
        } => {
            let cfg = load_config(&common, None)?;
            let model = checkpoint::load::<f32>(&ckpt)?;
            if model.config != cfg.model {
                return Err(ConfigError::field(
                    "model",
                    format!("checkpoint {} was trained with a different model config", ckpt.display()),
                )
                .into());
            }
            let dir = run_dir(&common, &cfg)?;
            dir.write_config(&cfg)?;
            let (_, test) = cfg.load_data()?;
            let exec = Exec::new(cfg.threads);
            let (mode, gammas) = match gates {
                Gates::Learned => (EvalGates::Learned, cfg.budget.gammas()),
                Gates::Open => (EvalGates::Open, [1.0; 3]),
            };
            let report = evaluate(&model, &test, mode, cfg.head_mode, &exec)?;
            dir.write_metrics(&[metrics_row("eval", gammas, &report)])?;
            write_eval(&dir, &report, &test, &cfg)?;
            println!("{}", summary(&report));
        }
        Command::Cost {
            common,
            policies,
            json,
        } => {
            let cfg = load_config(&common, None)?;
            let report = match &policies {
                None => static_flops(&cfg.model),
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    let records = parse_policies_jsonl(&text, path)?;
                    if records.is_empty() {
                        return Err(DataError::Empty.into());
                    }
                    let mut total = 0.0;
                    for r in &records {
                        let p = r.to_policy()?;
                        p.validate(&cfg.model)?;
                        total += policy_flops(&cfg.model, &p, cfg.head_mode)?.total as f64;
                    }
                    let mean = total / records.len() as f64;
                    println!(
                        "{}",
                        json!({"policies": records.len(), "mean_flops": mean, "gflops": mean / 1e9})
                    );
                    return Ok(());
                }
            };
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.table());
            }
        }
        Command::Sweep(common) => {
            let cfg = load_config(&common, None)?;
            let budgets = cfg
                .sweep
                .as_ref()
                .ok_or_else(|| ConfigError::field("sweep", "missing sweep settings"))?
                .budgets
                .clone();
            let dir = run_dir(&common, &cfg)?;
            dir.write_config(&cfg)?;
            let (train, test) = cfg.load_data()?;
            let exec = Exec::new(cfg.threads);
            let (points, logs) = run_sweep(&cfg, &budgets, &train, &test, &exec, &mut progress)?;
            dir.write_train_log(&logs)?;
            let rows: Vec<_> = points
                .iter()
                .map(|p| metrics_row(sweep_run_id(p.gammas), p.gammas, &p.report))
                .collect();
            dir.write_metrics(&rows)?;
            for p in &points {
                println!("{}", json!({"gammas": p.gammas, "result": summary(&p.report)}));
            }
        }
        Command::Analyze { common, run } => {
            let cfg = load_config(&common, Some(&run.join(CONFIG)))?;
            let path = run.join(POLICIES);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let records = parse_policies_jsonl(&text, &path)?;
            let (_, test) = cfg.load_data()?;
            let stats = analyze_policies(&records, &test, &cfg.model, cfg.head_mode)?;
            let dir = run_dir(&common, &cfg)?;
            dir.write_stats(&stats, &records, &test, cfg.model.num_patches())?;
            dir.write(
                "stats/summary.json",
                serde_json::to_string_pretty(&stats).expect("stats serialize"),
            )?;
            println!(
                "{}",
                json!({
                    "mean_patches": stats.mean_patches,
                    "mean_heads": stats.mean_heads,
                    "mean_blocks": stats.mean_blocks,
                })
            );
        }
        Command::Baseline(common) => {
            let cfg = load_config(&common, None)?;
            let dir = run_dir(&common, &cfg)?;
            dir.write_config(&cfg)?;
            let (train, test) = cfg.load_data()?;
            let exec = Exec::new(cfg.threads);
            let c = run_comparison(&cfg, &train, &test, &exec, &mut progress)?;
            dir.write_checkpoint(&c.adaptive)?;
            dir.write_train_log(&c.logs)?;
            let rows = c.rows(cfg.budget.gammas());
            dir.write_metrics(&rows)?;
            write_eval(&dir, &c.adavit, &test, &cfg)?;
            let flops = |d: &str| -> Vec<f64> {
                c.adavit
                    .samples
                    .iter()
                    .filter(|s| s.difficulty.as_str() == d)
                    .map(|s| s.flops as f64)
                    .collect()
            };
            let comparison = json!({
                "fractions": c.fractions,
                "rows": rows,
                "hard_vs_easy_flops": welch_t_test(&flops("hard"), &flops("easy")),
            });
            dir.write(
                "stats/comparison.json",
                serde_json::to_string_pretty(&comparison).expect("json"),
            )?;
            for r in &rows {
                println!("{}", serde_json::to_string(r).expect("json"));
            }
        }
    }
    Ok(())
}
