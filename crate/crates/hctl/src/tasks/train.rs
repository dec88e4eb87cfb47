use hctl_core::densities::Checkerboard;
use hctl_core::flowmodel::{train_mlp, write_weights};
use hctl_core::guidance::{sample, GuidanceSpec, Variant};
use hctl_core::metrics::manifold_hit;
use hctl_core::rng::{stream, SamplerStreams, Stream};
use serde_json::json;

use super::points;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::record::{Artifacts, ResultRecord};
use crate::{row, svg};

pub(super) fn run(cfg: &ExperimentConfig, art: &mut Artifacts, rec: &mut ResultRecord) -> Result<()> {
    let cb = Checkerboard::new();
    let out = train_mlp(&cb, &cfg.train, &mut stream(cfg.train.seed, Stream::Training, 0))?;
    let mut weights = Vec::new();
    write_weights(&out.model, &mut weights)?;
    art.bytes("weights.bin", &weights)?;
    let rows: Vec<Vec<String>> = out.curve.iter().map(|p| row![p.iteration, p.loss, p.lr]).collect();
    art.csv("loss.csv", &["iteration", "loss", "lr"], &rows)?;

    let n = cfg.train_eval_samples;
    let draws = sample(
        &out.model,
        &cfg.schedule()?,
        None,
        &GuidanceSpec::new(Variant::None),
        n,
        &mut SamplerStreams::new(cfg.seeds.master, 0),
    )?;
    let pts = points(&draws.samples);
    let hit = manifold_hit(&pts)?;
    println!("manifold-hit {hit:.4} over {n} unconditional samples ({:.1} s training)", out.seconds);
    let squares: Vec<([f64; 2], bool)> = cb.centers().iter().map(|c| (*c, false)).collect();
    art.text("unconditional.svg", &svg::scatter("unconditional samples", &pts, &squares, None))?;

    rec.summary = json!({
        "manifold_hit": hit,
        "eval_samples": n,
        "initial_loss": out.curve.first().map(|p| p.loss),
        "final_loss": out.curve.last().map(|p| p.loss),
        "parameters": out.model.parameter_count(),
    });
    rec.nfe.insert("unconditional".into(), draws.mean_nfe());
    rec.timings.insert("training_seconds".into(), out.seconds);
    Ok(())
}
