//! Data, baselines, statistics and run bookkeeping.

mod analysis;
mod baselines;
mod config;
mod data;
pub mod experiment;
pub mod rundir;
mod stats;

pub use analysis::{
    analyze_policies, patch_masks_csv, policy_stats, quantile, BlockUsage, GroupFlops, PolicyStats,
    Summary,
};
pub use baselines::{
    random_policy, run_baseline, BaselineKind, BaselineOutcome, BaselineSetup, BlockFractions,
    RandomPolicy,
};
pub use config::{BaselineConfig, DataConfig, RunConfig, SweepConfig};
pub use data::{
    generate_synthetic, load_image_folder, Dataset, Difficulty, GeneratorKind, Normalization,
    SyntheticTaskSpec, GLYPH_TYPES,
};
pub use rundir::{metrics_csv, sig3, MetricsRow, RunDir};
pub use stats::{welch_t_test, WelchTest};
