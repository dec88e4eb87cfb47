//! Experiment harness: JSON configs, per-task runners, CSV/SVG artifacts and
//! the `results.json` record.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod record;
pub mod svg;
pub mod tasks;

use std::path::Path;

pub use config::{ExperimentConfig, Overrides, Task};
pub use error::{HarnessError, Result};
pub use record::ResultRecord;

/// Loads, resolves and runs a config file on a pool of `threads` workers
/// (0 lets the pool pick).
pub fn run_file(task: Task, path: &Path, overrides: &Overrides, threads: usize) -> Result<ResultRecord> {
    let cfg = ExperimentConfig::from_path(path)?.resolve(task, overrides)?;
    run_resolved(&cfg, threads)
}

pub fn run_resolved(cfg: &ExperimentConfig, threads: usize) -> Result<ResultRecord> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    pool.install(|| tasks::execute(cfg))
}
