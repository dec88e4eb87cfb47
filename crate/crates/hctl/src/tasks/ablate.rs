use hctl_core::guidance::{HControlConfig, Readout, Variant};
use hctl_core::metrics::{energy_distance, polyak_variance_ratio};
use hctl_core::rng::{stream, Stream};
use hctl_core::schedule::StateTensor;
use serde_json::json;

use super::*;
use crate::config::Evidence;

pub const HEADER: [&str; 7] = ["readout", "freeze", "seed", "metric", "value", "mean_inner_iters", "nfe"];

struct CellResult {
    seed: u32,
    value: f64,
    inner_iters: f64,
    nfe: f64,
}

pub(super) fn run(cfg: &ExperimentConfig, art: &mut Artifacts, rec: &mut ResultRecord) -> Result<()> {
    let model = load_model(cfg)?;
    let schedule = cfg.schedule()?;
    let ev = Evidence::build(cfg)?;
    let obs = &ev.observation;
    let base: HControlConfig = cfg.ablate.h_control.expect("resolved");
    let shape = obs.values.shape();
    let free = obs.mask.unobserved_coords(shape);
    let metric = if ev.toy.is_some() { "posterior_hit" } else { "energy_distance" };

    // Exact draws of the unobserved block for the GMRF energy metric.
    let oracle_draws: Option<Vec<Vec<f64>>> = match &ev.gmrf {
        Some(spec) => {
            let observed: Vec<f64> = obs.mask.observed_coords(shape).iter().map(|&i| obs.values.data()[i]).collect();
            let law = spec.evidence_conditional(&obs.mask, &observed, obs.tau)?;
            let flat = law.sample(cfg.samples_per_seed, &mut stream(cfg.seeds.master, Stream::Oracle, 0))?;
            Some(flat.chunks_exact(free.len().max(1)).map(|c| c.to_vec()).collect())
        }
        None => None,
    };

    let mut rows = Vec::new();
    let mut cells = Vec::new();
    for readout in [Readout::Polyak, Readout::Last] {
        for freeze in [true, false] {
            let hc = HControlConfig { readout, freeze, ..base };
            let spec = GuidanceSpec::new(Variant::HControl(hc));
            let results = per_seed(cfg.seeds.count, |seed| {
                let mut streams = SamplerStreams::new(cfg.seeds.master, seed);
                let out = sample(model.as_ref(), &schedule, Some(obs), &spec, cfg.samples_per_seed, &mut streams)?;
                let value = match (&ev.toy, &oracle_draws) {
                    (Some(toy), _) => posterior_hit(&points(&out.samples), toy)?.posterior_rate,
                    (None, Some(draws)) => {
                        let got: Vec<Vec<f64>> = (0..out.samples.rows())
                            .map(|r| free.iter().map(|&i| out.samples.row(r)[i]).collect())
                            .collect();
                        energy_distance(&got, draws)?
                    }
                    (None, None) => unreachable!("evidence is either toy or gmrf"),
                };
                let windowed: Vec<f64> = out.diagnostics.iter().map(|d| d.inner_iters_used).collect();
                Ok(CellResult { seed, value, inner_iters: mean_std(&windowed).0, nfe: out.mean_nfe() })
            })?;
            let label = format!("{}_{}", readout_name(readout), if freeze { "freeze" } else { "nofreeze" });
            for r in &results {
                rows.push(row![readout_name(readout), freeze, r.seed, metric, r.value, r.inner_iters, r.nfe]);
                rec.seeds.push(json!({
                    "cell": label, "seed": r.seed, metric: r.value, "mean_inner_iters": r.inner_iters, "nfe": r.nfe
                }));
            }
            let (m, s) = mean_std(&results.iter().map(|r| r.value).collect::<Vec<_>>());
            let iters = mean_std(&results.iter().map(|r| r.inner_iters).collect::<Vec<_>>()).0;
            let nfe = mean_std(&results.iter().map(|r| r.nfe).collect::<Vec<_>>()).0;
            rec.nfe.insert(label.clone(), nfe);
            println!("{label}: {metric} {m:.4} ± {s:.4}, mean inner iterations {iters:.2}, NFE {nfe:.1}");
            cells.push(json!({
                "cell": label,
                "config": hc,
                "metric": metric,
                "mean": m,
                "std": s,
                "mean_inner_iters": iters,
                "nfe": nfe,
            }));
        }
    }
    art.csv("ablate.csv", &HEADER, &rows)?;

    // Variance reduction of the Polyak readout, probed from the evidence itself.
    let mut start = StateTensor::zeros(shape);
    for i in obs.mask.observed_coords(shape) {
        start.data_mut()[i] = obs.values.data()[i];
    }
    let ratio = if base.j_max >= 2 {
        Some(polyak_variance_ratio(
            model.as_ref(),
            obs,
            &start,
            cfg.ablate.sigma,
            base.j_max,
            cfg.ablate.repeats,
            &base,
            &mut stream(cfg.seeds.master, Stream::Inner, u32::MAX),
        )?)
    } else {
        None
    };
    if let Some(r) = ratio {
        println!("polyak variance ratio at J={} over {} chains: {r:.4}", base.j_max, cfg.ablate.repeats);
    }
    rec.summary = json!({"cells": cells, "polyak_variance_ratio": ratio, "j_max": base.j_max});
    Ok(())
}

fn readout_name(r: Readout) -> &'static str {
    match r {
        Readout::Polyak => "polyak",
        Readout::Last => "last",
    }
}
