//! Experiment orchestration behind the `csi` command line.
//!
//! Every command takes an [`ExperimentConfig`] and writes under its
//! `out_dir`: scenario files and split manifests in `data/`, one directory
//! per command holding results CSVs, SVG plots and per-run checkpoints.
//! CSV and checkpoint bytes depend only on the config; wall times go to a
//! separate `summary.txt`.

mod commands;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod plot;
pub mod report;
pub mod train;

pub use commands::{
    cmd_evaluate, cmd_generalize, cmd_generate, cmd_gradcheck, cmd_sweep_cr, cmd_sweep_samples, cmd_train, make_codec,
    worker_count, GeneralizeRow, GenerateReport, RunResult, WORKERS_ENV,
};
pub use config::{ExperimentConfig, SampleCount, ScenarioRange};
pub use data::{DataLoader, RawSplits, Split};
pub use report::ResultRow;
