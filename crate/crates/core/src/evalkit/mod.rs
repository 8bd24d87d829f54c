//! Metrics and experiment protocols: the detection experiment, its
//! transfer variant, stress test, theorem probes, OOD study and
//! dimensionality sweep.

pub mod config;
mod dimensionality;
mod experiment;
mod metrics;
mod ood;
mod probe;
mod stress;

pub use config::{
    parse_number, AttackSpec, DataConfig, DataSource, Direction, ExperimentConfig, Metric, SubSeeds, TargetRule,
};
pub use dimensionality::{dimensionality_sweep, downsample, DimensionRow, DimensionalityReport};
pub use experiment::{
    attack_pool, budget_audit, cell_budget, fit_attack_detectors, fit_hfc_models, judge_on, prepare, prepare_set,
    resolve_attack, run_experiment, run_experiment_with, sweep_plot_csv, targets_for, train_network,
    transfer_experiment, transfer_experiment_with, AdvCount, AdvSet, AttackCell, DataSummary, DetectorCell, EmLog,
    ExperimentOutput, ExperimentReport, HfcModels, Prepared, RunOptions, ScoreFile, StageTiming, TransferOutput,
    VariantCell, BUDGET_TOL, REPORT_FORMAT_VERSION,
};
pub use metrics::{adv_acc, auc, tpr_at_tnr};
pub use ood::{hfc_score, ood_experiment, run_ood, OodCell, OodReport};
pub use probe::{pearson, run_probe, theorem_probe, ProbeReport, Theorem};
pub use stress::{run_stress, stress_test, StressReport};
