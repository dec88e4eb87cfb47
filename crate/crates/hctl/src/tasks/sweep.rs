use hctl_core::guidance::{HControlConfig, JacobianMode, TfgConfig, Variant};
use hctl_core::metrics::ChainDiagnostics;
use serde_json::json;

use super::*;
use crate::config::Evidence;
use crate::svg::Series;

pub const SUMMARY_HEADER: [&str; 6] =
    ["method", "parameter", "nfe", "posterior_hit_mean", "posterior_hit_std", "manifold_hit_mean"];

struct Cell {
    label: String,
    family: &'static str,
    parameter: usize,
    spec: GuidanceSpec,
}

fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let hc: HControlConfig = cfg.sweep.h_control.expect("resolved");
    let tfg: TfgConfig = cfg.sweep.tfg;
    let mut out = Vec::new();
    for &j in &cfg.sweep.j_values {
        out.push(Cell {
            label: format!("h_control_j{j}"),
            family: "h_control",
            parameter: j,
            spec: GuidanceSpec::new(Variant::HControl(HControlConfig { j_max: j, ..hc })),
        });
    }
    for &n in &cfg.sweep.n_recur_values {
        out.push(Cell {
            label: format!("tfg_ugd_r{n}"),
            family: "tfg_ugd",
            parameter: n,
            spec: GuidanceSpec::new(Variant::TfgUgd(TfgConfig { n_recur: n, ..tfg })),
        });
    }
    out
}

fn references() -> Vec<(String, GuidanceSpec)> {
    [("dps_stop_grad", JacobianMode::StopGrad), ("dps_full_vjp", JacobianMode::FullVjp)]
        .into_iter()
        .map(|(l, mode)| (l.to_string(), GuidanceSpec::new(Variant::Dps { zeta: None, jacobian_mode: mode })))
        .collect()
}

pub(super) fn run(cfg: &ExperimentConfig, art: &mut Artifacts, rec: &mut ResultRecord) -> Result<()> {
    let model = load_model(cfg)?;
    let schedule = cfg.schedule()?;
    let ev = Evidence::build(cfg)?;
    let toy = ev.toy.expect("sweep validates a checkerboard density");
    let mut per_seed_rows = Vec::new();
    let mut summary_rows = Vec::new();
    let mut cell_json = Vec::new();
    let mut series: Vec<Series> = Vec::new();
    let mut deepest: Option<(usize, Vec<ToyRun>)> = None;

    for cell in cells(cfg) {
        let runs = toy_runs(cfg, model.as_ref(), &schedule, &ev.observation, &toy, &cell.spec)?;
        let s = summarize(&runs);
        per_seed_rows.extend(hit_rows(&cell.label, &runs));
        summary_rows.push(row![cell.label, cell.parameter, s.nfe, s.posterior_hit_mean, s.posterior_hit_std, s.manifold_hit_mean]);
        rec.seeds.extend(seed_json(&cell.label, &runs));
        rec.nfe.insert(cell.label.clone(), s.nfe);
        cell_json.push(json!({"method": cell.label, "family": cell.family, "parameter": cell.parameter, "summary": s}));
        println!("{}: posterior-hit {:.4} ± {:.4} at NFE {:.0}", cell.label, s.posterior_hit_mean, s.posterior_hit_std, s.nfe);
        match series.iter_mut().find(|x| x.label == cell.family) {
            Some(x) => x.points.push((s.nfe, s.posterior_hit_mean, s.posterior_hit_std)),
            None => series.push(Series {
                label: cell.family.to_string(),
                color: if cell.family == "h_control" { "#c0392b" } else { "#1f4e79" },
                points: vec![(s.nfe, s.posterior_hit_mean, s.posterior_hit_std)],
            }),
        }
        if cell.family == "h_control" && deepest.as_ref().is_none_or(|d| cell.parameter > d.0) {
            deepest = Some((cell.parameter, runs));
        }
    }
    art.csv("sweep.csv", &HIT_HEADER, &per_seed_rows)?;
    art.csv("sweep_summary.csv", &SUMMARY_HEADER, &summary_rows)?;

    let mut ref_rows = Vec::new();
    let mut ref_json = Vec::new();
    let mut ref_lines = Vec::new();
    for (label, spec) in references() {
        let runs = toy_runs(cfg, model.as_ref(), &schedule, &ev.observation, &toy, &spec)?;
        let s = summarize(&runs);
        ref_rows.extend(hit_rows(&label, &runs));
        rec.nfe.insert(label.clone(), s.nfe);
        ref_json.push(json!({"method": label, "summary": s}));
        ref_lines.push((format!("{label} (NFE {:.0})", s.nfe), s.posterior_hit_mean));
        println!("{label}: posterior-hit {:.4} ± {:.4} at NFE {:.0}", s.posterior_hit_mean, s.posterior_hit_std, s.nfe);
    }
    art.csv("references.csv", &HIT_HEADER, &ref_rows)?;
    art.text(
        "sweep.svg",
        &svg::line_chart("posterior-hit vs NFE", "NFE per chain", "posterior-hit", &series, &ref_lines),
    )?;

    let mut bands_json = json!(null);
    if let Some((j, runs)) = deepest.filter(|d| d.0 > 0) {
        let per: Vec<ChainDiagnostics> = runs
            .iter()
            .map(|r| ChainDiagnostics::from_steps(&r.output.diagnostics, &cfg.sweep.band_edges))
            .collect::<std::result::Result<_, _>>()?;
        let edges = &cfg.sweep.band_edges;
        let mut rows = Vec::new();
        let mut table = Vec::new();
        for b in 0..edges.len() - 1 {
            let mut curve = Vec::new();
            for it in 0..j {
                let vals: Vec<f64> = per.iter().map(|c| c.dw_by_band[b][it]).filter(|v| v.is_finite()).collect();
                let m = mean_std(&vals).0;
                rows.push(row![edges[b], edges[b + 1], it + 1, m]);
                curve.push(m);
            }
            table.push(json!({"band": [edges[b], edges[b + 1]], "mean_abs_dw": curve}));
        }
        art.csv("dw_bands.csv", &["sigma_lo", "sigma_hi", "j", "mean_abs_dW"], &rows)?;
        bands_json = json!({"j_max": j, "bands": table});
    }
    rec.summary = json!({"cells": cell_json, "references": ref_json, "dw_by_band": bands_json});
    Ok(())
}
