use hctl_core::densities::Checkerboard;
use hctl_core::metrics::posterior_hit;
use hctl_core::rng::{stream, Stream};
use serde_json::{json, Map, Value};

use super::*;
use crate::config::Evidence;

pub(super) fn run(cfg: &ExperimentConfig, art: &mut Artifacts, rec: &mut ResultRecord) -> Result<()> {
    let model = load_model(cfg)?;
    let schedule = cfg.schedule()?;
    let ev = Evidence::build(cfg)?;
    let toy = ev.toy.expect("toy-fig validates a checkerboard density");
    let mut hit_table = Vec::new();
    let mut summary = Map::new();

    // Ground truth first: exact draws from the conditional posterior.
    let cb = Checkerboard::new();
    let oracle = per_seed(cfg.seeds.count, |seed| {
        let pts = cb.posterior_sample(&toy, cfg.samples_per_seed, &mut stream(cfg.seeds.master, Stream::Oracle, seed));
        let hits = posterior_hit(&pts, &toy)?;
        Ok((seed, pts, hits))
    })?;
    let pooled: Vec<[f64; 2]> = oracle.iter().flat_map(|o| o.1.iter().copied()).collect();
    write_cloud(art, "oracle", &oracle.iter().map(|o| (o.0, o.1.as_slice())).collect::<Vec<_>>())?;
    art.text("oracle.svg", &toy_scatter("oracle posterior", &pooled, &toy))?;
    for (seed, _, h) in &oracle {
        hit_table.push(row!["oracle", 0, seed, h.posterior_rate, h.manifold_rate, h.mode_balance]);
        rec.seeds.push(json!({"method": "oracle", "seed": seed, "nfe": 0, "hits": h}));
    }
    let rates: Vec<f64> = oracle.iter().map(|o| o.2.posterior_rate).collect();
    summary.insert("oracle".into(), json!({"posterior_hit_mean": mean_std(&rates).0}));

    for (label, spec) in method_labels(&cfg.methods).iter().zip(&cfg.methods) {
        let runs = toy_runs(cfg, model.as_ref(), &schedule, &ev.observation, &toy, spec)?;
        write_cloud(art, label, &runs.iter().map(|r| (r.seed, r.points.as_slice())).collect::<Vec<_>>())?;
        let pooled: Vec<[f64; 2]> = runs.iter().flat_map(|r| r.points.iter().copied()).collect();
        let s = summarize(&runs);
        let title = format!("{label} (NFE {:.0}, posterior-hit {:.3})", s.nfe, s.posterior_hit_mean);
        art.text(&format!("{label}.svg"), &toy_scatter(&title, &pooled, &toy))?;
        art.csv(&format!("{label}_diagnostics.csv"), &DIAGNOSTICS_HEADER, &diagnostic_rows(&runs))?;
        hit_table.extend(hit_rows(label, &runs));
        rec.seeds.extend(seed_json(label, &runs));
        rec.nfe.insert(label.clone(), s.nfe);
        summary.insert(label.clone(), serde_json::to_value(s).expect("summary serializes"));
        println!("{label}: posterior-hit {:.4} ± {:.4} at NFE {:.0}", s.posterior_hit_mean, s.posterior_hit_std, s.nfe);
    }
    art.csv("hits.csv", &HIT_HEADER, &hit_table)?;
    rec.summary = Value::Object(summary);
    Ok(())
}

fn write_cloud(art: &mut Artifacts, label: &str, clouds: &[(u32, &[[f64; 2]])]) -> Result<()> {
    let rows: Vec<Vec<String>> =
        clouds.iter().flat_map(|(seed, pts)| pts.iter().map(move |p| row![seed, p[0], p[1]])).collect();
    art.csv(&format!("{label}.csv"), &["seed", "x1", "x2"], &rows)
}
