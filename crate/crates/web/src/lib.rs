//! Browser demo on a single-layer GMRF slice: inpainting with hard
//! replacement against h-control, the ρ₁ locality map, and a trace of the
//! inner chain's freeze gate.
//!
//! Every export has a plain Rust twin returning [`hctl_core::Result`] so the
//! numerics are testable without a JavaScript host.

use hctl_core::densities::{GmrfParams, GmrfSpec};
use hctl_core::flowmodel::{GaussianModel, VelocityModel};
use hctl_core::guidance::{
    inner_gibbs, sample, GuidanceSpec, HControlConfig, InnerHooks, InnerStep, NfeCounter, Observation, OuterMode,
    Variant,
};
use hctl_core::locality::{analyze_axis, eta_decay, max_beyond, Axis};
use hctl_core::rng::{fill_normal, stream, SamplerStreams, Stream};
use hctl_core::schedule::{partition_complement, NoiseSchedule, PatchSizes, ScheduleKind, SiteMask, StateBatch};
use hctl_core::{HctlError, Result};
use wasm_bindgen::prelude::*;

const STEPS: usize = 50;
const MAX_SIDE: usize = 24;

fn slice_spec(n: usize) -> Result<GmrfSpec> {
    if !(4..=MAX_SIDE).contains(&n) {
        return Err(HctlError::InvalidArgument(format!("lattice side must lie in 4..={MAX_SIDE}, got {n}")));
    }
    GmrfSpec::build(GmrfParams { shape: (1, n, n), ..GmrfParams::default() })
}

/// Left `cols` columns observed exactly, values taken from one prior draw.
fn left_columns(spec: &GmrfSpec, cols: usize, seed: u32) -> Result<Observation> {
    let (_, _, n) = spec.params().shape;
    let mask = SiteMask::from_fn((1, n, n), |_, _, w| w < cols.min(n));
    let truth = spec.sample(1, &mut stream(u64::from(seed), Stream::Observation, 0)).remove(0);
    Observation::new(mask, truth, None)
}

fn hc_config(j_max: usize, kappa: f64, nu: f64) -> HControlConfig {
    HControlConfig {
        j_max,
        kappa,
        nu,
        patch_sizes: PatchSizes::new(1, 2, 2),
        outer_mode: OuterMode::Hard,
        ..HControlConfig::default()
    }
}

fn to_js(e: HctlError) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen]
pub struct Inpainting {
    side: usize,
    truth: Vec<f64>,
    mask: Vec<f64>,
    exact_mean: Vec<f64>,
    hard: Vec<f64>,
    h_control: Vec<f64>,
    hard_mean_error: f64,
    h_control_mean_error: f64,
    hard_nfe: f64,
    h_control_nfe: f64,
}

#[wasm_bindgen]
impl Inpainting {
    #[wasm_bindgen(getter)]
    pub fn side(&self) -> usize {
        self.side
    }
    #[wasm_bindgen(getter)]
    pub fn truth(&self) -> Vec<f64> {
        self.truth.clone()
    }
    /// 1 on observed sites.
    #[wasm_bindgen(getter)]
    pub fn mask(&self) -> Vec<f64> {
        self.mask.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn exact_mean(&self) -> Vec<f64> {
        self.exact_mean.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn hard(&self) -> Vec<f64> {
        self.hard.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn h_control(&self) -> Vec<f64> {
        self.h_control.clone()
    }
    /// RMS gap between the chain average and the exact conditional mean on
    /// the unobserved sites.
    #[wasm_bindgen(getter)]
    pub fn hard_mean_error(&self) -> f64 {
        self.hard_mean_error
    }
    #[wasm_bindgen(getter)]
    pub fn h_control_mean_error(&self) -> f64 {
        self.h_control_mean_error
    }
    #[wasm_bindgen(getter)]
    pub fn hard_nfe(&self) -> f64 {
        self.hard_nfe
    }
    #[wasm_bindgen(getter)]
    pub fn h_control_nfe(&self) -> f64 {
        self.h_control_nfe
    }
}

pub fn inpaint_native(side: usize, cols: usize, chains: usize, j_max: usize, kappa: f64, nu: f64, seed: u32) -> Result<Inpainting> {
    let spec = slice_spec(side)?;
    let obs = left_columns(&spec, cols, seed)?;
    let model = GaussianModel::new(&spec);
    let schedule = NoiseSchedule::build(STEPS, ScheduleKind::Linear)?;
    let shape = spec.shape();
    let free = obs.mask.unobserved_coords(shape);
    let observed: Vec<f64> = obs.mask.observed_coords(shape).iter().map(|&i| obs.values.data()[i]).collect();
    let law = spec.evidence_conditional(&obs.mask, &observed, None)?;

    let mut exact_mean = obs.values.data().to_vec();
    for (k, &i) in free.iter().enumerate() {
        exact_mean[i] = law.mean[k];
    }
    let chains = chains.max(1);
    let run = |variant: Variant| -> Result<(Vec<f64>, f64, f64)> {
        let mut streams = SamplerStreams::new(u64::from(seed), 0);
        let out = sample(&model, &schedule, Some(&obs), &GuidanceSpec::new(variant), chains, &mut streams)?;
        let mut avg = vec![0.0; free.len()];
        for r in 0..chains {
            for (a, &i) in avg.iter_mut().zip(&free) {
                *a += out.samples.row(r)[i] / chains as f64;
            }
        }
        let mse = avg.iter().zip(law.mean.iter()).map(|(a, m)| (a - m).powi(2)).sum::<f64>() / free.len().max(1) as f64;
        Ok((out.samples.row(0).to_vec(), mse.sqrt(), out.mean_nfe()))
    };
    let (hard, hard_mean_error, hard_nfe) = run(Variant::HardReplace)?;
    let (h_control, h_control_mean_error, h_control_nfe) = run(Variant::HControl(hc_config(j_max, kappa, nu)))?;
    Ok(Inpainting {
        side,
        truth: obs.values.data().to_vec(),
        mask: obs.mask.bits().iter().map(|&b| f64::from(u8::from(b))).collect(),
        exact_mean,
        hard,
        h_control,
        hard_mean_error,
        h_control_mean_error,
        hard_nfe,
        h_control_nfe,
    })
}

/// Fills the left `cols` columns from a prior draw and completes the rest
/// with hard replacement and with h-control, `chains` chains each.
#[wasm_bindgen]
pub fn inpaint(side: usize, cols: usize, chains: usize, j_max: usize, kappa: f64, nu: f64, seed: u32) -> std::result::Result<Inpainting, JsValue> {
    inpaint_native(side, cols, chains, j_max, kappa, nu, seed).map_err(to_js)
}

#[wasm_bindgen]
pub struct LocalityMap {
    positions: usize,
    rho: Vec<f64>,
    eta: Vec<f64>,
    noise_floor: f64,
    band: usize,
    eta_at_band: f64,
    max_beyond_band: f64,
}

#[wasm_bindgen]
impl LocalityMap {
    #[wasm_bindgen(getter)]
    pub fn positions(&self) -> usize {
        self.positions
    }
    /// Row-major `positions × positions` map of |ρ₁|.
    #[wasm_bindgen(getter)]
    pub fn rho(&self) -> Vec<f64> {
        self.rho.clone()
    }
    /// η(r) for r = 0, 1, ….
    #[wasm_bindgen(getter)]
    pub fn eta(&self) -> Vec<f64> {
        self.eta.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn noise_floor(&self) -> f64 {
        self.noise_floor
    }
    #[wasm_bindgen(getter)]
    pub fn band(&self) -> usize {
        self.band
    }
    #[wasm_bindgen(getter)]
    pub fn eta_at_band(&self) -> f64 {
        self.eta_at_band
    }
    #[wasm_bindgen(getter)]
    pub fn max_beyond_band(&self) -> f64 {
        self.max_beyond_band
    }
}

pub fn locality_native(side: usize, samples: usize, sigma: f64, seed: u32) -> Result<LocalityMap> {
    let spec = slice_spec(side)?;
    if !(0.0..1.0).contains(&sigma) {
        return Err(HctlError::InvalidArgument(format!("sigma must lie in [0, 1), got {sigma}")));
    }
    let master = u64::from(seed);
    let mut draws = spec.sample(samples, &mut stream(master, Stream::Data, 0));
    if sigma > 0.0 {
        let shape = spec.shape();
        let mut noisy = StateBatch::zeros(shape, samples);
        let mut eps = vec![0.0; shape.len()];
        let mut rng = stream(master, Stream::InitNoise, 0);
        for (r, x) in draws.iter().enumerate() {
            fill_normal(&mut rng, &mut eps);
            for ((o, a), e) in noisy.row_mut(r).iter_mut().zip(x.data()).zip(&eps) {
                *o = (1.0 - sigma) * a + sigma * e;
            }
        }
        let zhat = GaussianModel::new(&spec).clean_prediction(&noisy, sigma)?;
        draws = (0..samples).map(|r| zhat.tensor(r)).collect();
    }
    let report = analyze_axis(&draws, Axis::W)?;
    let map = &report.map;
    let p = map.rho.nrows();
    let band = spec.band();
    Ok(LocalityMap {
        positions: p,
        rho: (0..p).flat_map(|i| (0..p).map(move |j| (i, j))).map(|(i, j)| map.rho[(i, j)].abs()).collect(),
        eta: report.eta.iter().map(|&(_, e)| e).collect(),
        noise_floor: map.noise_floor,
        band,
        eta_at_band: eta_decay(map, band).value,
        max_beyond_band: max_beyond(map, band),
    })
}

/// ρ₁ map along W for clean draws (`sigma = 0`) or for clean predictions
/// made from draws noised to `sigma`.
#[wasm_bindgen]
pub fn locality(side: usize, samples: usize, sigma: f64, seed: u32) -> std::result::Result<LocalityMap, JsValue> {
    locality_native(side, samples, sigma, seed).map_err(to_js)
}

#[wasm_bindgen]
pub struct GateTrace {
    patches: usize,
    iterations: usize,
    stable_fraction: Vec<f64>,
    mean_abs_dw: Vec<f64>,
    stable_map: Vec<f64>,
}

#[wasm_bindgen]
impl GateTrace {
    #[wasm_bindgen(getter)]
    pub fn patches(&self) -> usize {
        self.patches
    }
    /// Iterations run before the early exit, at most `j_max`.
    #[wasm_bindgen(getter)]
    pub fn iterations(&self) -> usize {
        self.iterations
    }
    #[wasm_bindgen(getter)]
    pub fn stable_fraction(&self) -> Vec<f64> {
        self.stable_fraction.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn mean_abs_dw(&self) -> Vec<f64> {
        self.mean_abs_dw.clone()
    }
    /// Per-site iteration at which its patch first turned stable, 0 when
    /// observed or never.
    #[wasm_bindgen(getter)]
    pub fn stable_map(&self) -> Vec<f64> {
        self.stable_map.clone()
    }
}

pub fn gate_trace_native(side: usize, cols: usize, sigma: f64, j_max: usize, kappa: f64, nu: f64, seed: u32) -> Result<GateTrace> {
    let spec = slice_spec(side)?;
    let obs = left_columns(&spec, cols, seed)?;
    let model = GaussianModel::new(&spec);
    let cfg = hc_config(j_max, kappa, nu);
    cfg.validate()?;
    let partition = partition_complement(&obs.mask, cfg.patch_sizes)?;
    let shape = spec.shape();

    let mut start = StateBatch::zeros(shape, 1);
    for i in obs.mask.observed_coords(shape) {
        start.row_mut(0)[i] = obs.values.data()[i];
    }
    let master = u64::from(seed);
    let mut stable_fraction = Vec::new();
    let mut frozen_at = vec![0usize; partition.count()];
    let mut watch = |s: &InnerStep<'_>| {
        let flags = &s.stable[0];
        stable_fraction.push(flags.iter().filter(|&&b| b).count() as f64 / flags.len().max(1) as f64);
        for (at, &b) in frozen_at.iter_mut().zip(flags) {
            if b && *at == 0 {
                *at = s.j;
            }
        }
    };
    let mut counters = [NfeCounter::default()];
    let outcome = inner_gibbs(
        &model,
        &start,
        &obs,
        sigma,
        &cfg,
        &partition,
        &mut stream(master, Stream::Pin, 0),
        &mut stream(master, Stream::Inner, 0),
        &mut counters,
        InnerHooks { pin: None, observer: Some(&mut watch) },
    )?;
    let mut stable_map = vec![0.0; shape.sites()];
    for (patch, &at) in partition.patches().iter().zip(&frozen_at) {
        for &site in patch {
            stable_map[site] = at as f64;
        }
    }
    Ok(GateTrace {
        patches: partition.count(),
        iterations: outcome.iterations[0],
        stable_fraction,
        mean_abs_dw: outcome.mean_abs_dw,
        stable_map,
    })
}

/// One inner chain at noise level `sigma`, recording when each patch's
/// freeze gate fires.
#[wasm_bindgen]
pub fn gate_trace(side: usize, cols: usize, sigma: f64, j_max: usize, kappa: f64, nu: f64, seed: u32) -> std::result::Result<GateTrace, JsValue> {
    gate_trace_native(side, cols, sigma, j_max, kappa, nu, seed).map_err(to_js)
}
