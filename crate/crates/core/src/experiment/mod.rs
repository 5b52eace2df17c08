//! Experiment configuration, grid runner and run comparison.

mod compare;
mod config;
mod runner;

pub use compare::{compare, load_run, schedule_diff, ArmSummary, Comparison, LoadedRun, PairVerdict, COMPARED};
pub use config::{
    AdapterSection, ExperimentConfig, FieldError, MergeSection, ModelSection, ResolvedConfig, SMagNormSection,
    ScheduleKind, ScheduleSection,
};
pub use runner::{
    csv_text, load_config, metric_rows, read_manifest_config, run_experiment, run_grid, sha256_hex, CellOutput,
    LabError, RunOptions, RunSummary,
};
