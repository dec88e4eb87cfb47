mod ablate;
mod locality;
mod oracle;
mod sweep;
mod toy;
mod train;

use std::time::Instant;

use hctl_core::densities::{Checkerboard, ObsModel};
use hctl_core::flowmodel::{read_weights, GaussianModel, VelocityModel};
use hctl_core::guidance::{sample, GuidanceSpec, Observation, SampleOutput};
use hctl_core::metrics::{mean_std, posterior_hit, HitReport};
use hctl_core::rng::SamplerStreams;
use hctl_core::schedule::{NoiseSchedule, StateBatch};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{DensityConfig, ExperimentConfig, ModelConfig, Task};
use crate::error::{HarnessError, Result};
use crate::record::{Artifacts, ResultRecord};
use crate::row;
use crate::svg;

pub use oracle::{run_chain_check, ChainCheck};

pub const HIT_HEADER: [&str; 6] = ["method", "nfe", "seed", "posterior_hit", "manifold_hit", "mode_balance"];
pub const DIAGNOSTICS_HEADER: [&str; 8] =
    ["seed", "outer_step", "sigma", "inner_iters_used", "stable_fraction", "mean_abs_dW", "nfe_forward", "nfe_backward"];

/// Runs a resolved config and writes `results.json` plus the task's artifacts.
pub fn execute(cfg: &ExperimentConfig) -> Result<ResultRecord> {
    let task = cfg.task.ok_or_else(|| HarnessError::Config("config has no task".into()))?;
    let started = Instant::now();
    let mut art = Artifacts::create(&cfg.out_dir)?;
    let mut rec = ResultRecord::new(cfg);
    match task {
        Task::Train => train::run(cfg, &mut art, &mut rec)?,
        Task::ToyFig => toy::run(cfg, &mut art, &mut rec)?,
        Task::Sweep => sweep::run(cfg, &mut art, &mut rec)?,
        Task::GibbsOracle => oracle::run(cfg, &mut art, &mut rec)?,
        Task::Locality => locality::run(cfg, &mut art, &mut rec)?,
        Task::Ablate => ablate::run(cfg, &mut art, &mut rec)?,
    }
    rec.timings.insert("wall_clock_seconds".into(), started.elapsed().as_secs_f64());
    art.finish(rec)
}

pub(crate) fn load_model(cfg: &ExperimentConfig) -> Result<Box<dyn VelocityModel>> {
    match (&cfg.model, &cfg.density) {
        (ModelConfig::Mlp { weights }, _) => {
            let f = std::fs::File::open(weights).map_err(|e| HarnessError::io(weights, e))?;
            let model = read_weights(std::io::BufReader::new(f)).map_err(|e| match HarnessError::from(e) {
                HarnessError::Io { source, .. } => HarnessError::io(weights, source),
                other => other,
            })?;
            Ok(Box::new(model))
        }
        (ModelConfig::Gaussian, DensityConfig::Gmrf { params, .. }) => {
            Ok(Box::new(GaussianModel::new(&hctl_core::densities::GmrfSpec::build(*params)?)))
        }
        (ModelConfig::Gaussian, _) => Err(HarnessError::Config("the gaussian backend needs a gmrf density".into())),
    }
}

/// Runs `f` for every seed index on the worker pool; results come back in
/// seed order whatever the completion order.
pub(crate) fn per_seed<T: Send>(count: u32, f: impl Fn(u32) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    (0..count).into_par_iter().map(f).collect()
}

pub(crate) fn points(b: &StateBatch) -> Vec<[f64; 2]> {
    (0..b.rows()).map(|r| [b.row(r)[0], b.row(r)[1]]).collect()
}

/// Labels that stay unique when a method appears more than once.
pub(crate) fn method_labels(methods: &[GuidanceSpec]) -> Vec<String> {
    methods
        .iter()
        .enumerate()
        .map(|(i, m)| match methods[..i].iter().filter(|o| o.name() == m.name()).count() {
            0 => m.name().to_string(),
            n => format!("{}_{n}", m.name()),
        })
        .collect()
}

/// One guided toy run per seed.
pub(crate) struct ToyRun {
    pub seed: u32,
    pub points: Vec<[f64; 2]>,
    pub hits: HitReport,
    pub nfe: f64,
    pub output: SampleOutput,
}

pub(crate) fn toy_runs(
    cfg: &ExperimentConfig,
    model: &dyn VelocityModel,
    schedule: &NoiseSchedule,
    obs: &Observation,
    toy: &ObsModel,
    spec: &GuidanceSpec,
) -> Result<Vec<ToyRun>> {
    per_seed(cfg.seeds.count, |seed| {
        let mut streams = SamplerStreams::new(cfg.seeds.master, seed);
        let output = sample(model, schedule, Some(obs), spec, cfg.samples_per_seed, &mut streams)?;
        let pts = points(&output.samples);
        let hits = posterior_hit(&pts, toy)?;
        Ok(ToyRun { seed, nfe: output.mean_nfe(), points: pts, hits, output })
    })
}

pub(crate) fn hit_rows(label: &str, runs: &[ToyRun]) -> Vec<Vec<String>> {
    runs.iter()
        .map(|r| row![label, r.nfe, r.seed, r.hits.posterior_rate, r.hits.manifold_rate, r.hits.mode_balance])
        .collect()
}

pub(crate) fn diagnostic_rows(runs: &[ToyRun]) -> Vec<Vec<String>> {
    runs.iter()
        .flat_map(|r| {
            r.output.diagnostics.iter().map(move |d| {
                row![
                    r.seed,
                    d.outer_step,
                    d.sigma,
                    d.inner_iters_used,
                    d.stable_fraction,
                    d.mean_abs_dw,
                    d.nfe_forward,
                    d.nfe_backward
                ]
            })
        })
        .collect()
}

/// Aggregate hit statistics over seeds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HitSummary {
    pub posterior_hit_mean: f64,
    pub posterior_hit_std: f64,
    /// Standard error of the pooled rate over all samples.
    pub posterior_hit_pooled_se: f64,
    pub manifold_hit_mean: f64,
    pub mode_balance_mean: f64,
    pub nfe: f64,
}

pub(crate) fn summarize(runs: &[ToyRun]) -> HitSummary {
    let post: Vec<f64> = runs.iter().map(|r| r.hits.posterior_rate).collect();
    let (m, s) = mean_std(&post);
    let n: usize = runs.iter().map(|r| r.hits.n_samples).sum();
    let hits: usize = runs.iter().map(|r| r.hits.posterior_hits).sum();
    let p = hits as f64 / n as f64;
    let balance: Vec<f64> = runs.iter().map(|r| r.hits.mode_balance).filter(|b| b.is_finite()).collect();
    HitSummary {
        posterior_hit_mean: m,
        posterior_hit_std: s,
        posterior_hit_pooled_se: (p * (1.0 - p) / n as f64).sqrt(),
        manifold_hit_mean: mean_std(&runs.iter().map(|r| r.hits.manifold_rate).collect::<Vec<_>>()).0,
        mode_balance_mean: mean_std(&balance).0,
        nfe: runs.first().map_or(0.0, |r| r.nfe),
    }
}

pub(crate) fn seed_json(label: &str, runs: &[ToyRun]) -> Vec<Value> {
    runs.iter().map(|r| json!({"method": label, "seed": r.seed, "nfe": r.nfe, "hits": r.hits})).collect()
}

/// Scatter of a toy cloud with the conditional mode squares highlighted.
pub(crate) fn toy_scatter(title: &str, pts: &[[f64; 2]], toy: &ObsModel) -> String {
    let cb = Checkerboard::new();
    let modes = cb.conditional_modes(toy);
    let squares: Vec<([f64; 2], bool)> =
        cb.centers().iter().enumerate().map(|(i, c)| (*c, modes.contains(&i))).collect();
    let line = (toy.coord == 0).then_some(toy.y_obs);
    svg::scatter(title, pts, &squares, line)
}
