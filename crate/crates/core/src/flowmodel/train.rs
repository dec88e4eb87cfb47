use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Affine, Mlp, MlpConfig};
use crate::densities::Checkerboard;
use crate::error::{invalid, HctlError, Result};
use crate::rng::fill_normal;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_iterations")]
    pub iterations: usize,
    #[serde(default = "TrainConfig::default_batch")]
    pub batch: usize,
    #[serde(default = "TrainConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "TrainConfig::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    /// Keep every n-th iteration in the loss curve (the last one is always kept).
    #[serde(default = "TrainConfig::default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub model: MlpConfig,
}

impl TrainConfig {
    fn default_iterations() -> usize {
        20_000
    }
    fn default_batch() -> usize {
        512
    }
    fn default_lr() -> f64 {
        2e-3
    }
    fn default_weight_decay() -> f64 {
        1e-4
    }
    fn default_log_every() -> usize {
        10
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 || self.log_every == 0 {
            return Err(invalid("iterations, batch and log_every must be positive"));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("learning rate must be positive and weight decay non-negative"));
        }
        if self.model.state_dim != 2 {
            return Err(invalid("the checkerboard model has two coordinates"));
        }
        self.model.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch: 512,
            lr: 2e-3,
            weight_decay: 1e-4,
            seed: 0,
            log_every: 10,
            model: MlpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub curve: Vec<LossPoint>,
    pub seconds: f64,
}

/// Cosine decay from `lr0` at iteration 0 to exactly zero at the last iteration.
pub fn cosine_lr(lr0: f64, t: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr0;
    }
    let frac = t.min(total - 1) as f64 / (total - 1) as f64;
    let v = 0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos());
    if t + 1 >= total {
        0.0
    } else {
        v
    }
}

/// Flow-matching regression loss `mean_b ‖u(z_b, σ_b) − (ε_b − z0_b)‖²` and its
/// gradient w.r.t. every parameter, for given clean points, noises and levels.
pub fn loss_and_grad(model: &Mlp, z0: &[f64], eps: &[f64], sigmas: &[f64]) -> (f64, Vec<f64>) {
    let (loss, grads) = loss_and_layer_grads(model, z0, eps, sigmas);
    let mut flat = Vec::with_capacity(model.parameter_count());
    for g in &grads {
        for i in 0..g.w.nrows() {
            flat.extend(g.w.row(i).iter());
        }
        flat.extend(g.b.iter());
    }
    (loss, flat)
}

fn loss_and_layer_grads(model: &Mlp, z0: &[f64], eps: &[f64], sigmas: &[f64]) -> (f64, Vec<Affine>) {
    let n = sigmas.len();
    let d = model.config().state_dim;
    let zt: Vec<f64> = (0..n * d)
        .map(|i| {
            let s = sigmas[i / d];
            (1.0 - s) * z0[i] + s * eps[i]
        })
        .collect();
    let (out, tape) = model.forward(model.build_input(&zt, sigmas), true);
    let target = DMatrix::from_fn(d, n, |i, c| eps[c * d + i] - z0[c * d + i]);
    let resid = out - target;
    let loss = resid.norm_squared() / n as f64;
    let (_, grads) = model.backward(&tape.expect("tape kept"), resid * (2.0 / n as f64), true);
    (loss, grads.expect("parameter gradients requested"))
}

struct AdamW {
    m: Vec<Affine>,
    v: Vec<Affine>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    fn new(model: &Mlp) -> Self {
        let zeros = || {
            model
                .layers
                .iter()
                .map(|a| Affine {
                    w: DMatrix::zeros(a.w.nrows(), a.w.ncols()),
                    b: DVector::zeros(a.b.len()),
                })
                .collect::<Vec<_>>()
        };
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, model: &mut Mlp, grads: &[Affine], lr: f64, wd: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * (mh / (vh.sqrt() + ADAM_EPS) + wd * *p);
        };
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[l], &mut self.v[l], &grads[l]);
            for i in 0..layer.w.len() {
                update(&mut layer.w.as_mut_slice()[i], g.w.as_slice()[i], &mut m.w.as_mut_slice()[i], &mut v.w.as_mut_slice()[i]);
            }
            for i in 0..layer.b.len() {
                update(&mut layer.b[i], g.b[i], &mut m.b[i], &mut v.b[i]);
            }
        }
    }
}

/// Trains the checkerboard velocity field from scratch. Single-threaded and
/// deterministic given `rng`.
pub fn train_mlp<R: Rng + ?Sized>(density: &Checkerboard, cfg: &TrainConfig, rng: &mut R) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let mut model = Mlp::init(cfg.model, rng)?;
    let mut opt = AdamW::new(&model);
    let b = cfg.batch;
    let mut z0 = vec![0.0; 2 * b];
    let mut eps = vec![0.0; 2 * b];
    let mut sigmas = vec![0.0; b];
    let mut curve = Vec::with_capacity(cfg.iterations / cfg.log_every + 1);
    for t in 0..cfg.iterations {
        for (i, p) in density.sample(b, rng).into_iter().enumerate() {
            z0[2 * i] = p[0];
            z0[2 * i + 1] = p[1];
        }
        fill_normal(rng, &mut eps);
        for s in sigmas.iter_mut() {
            *s = rng.gen::<f64>();
        }
        let (loss, grads) = loss_and_layer_grads(&model, &z0, &eps, &sigmas);
        if !loss.is_finite() {
            return Err(HctlError::TrainingDiverged { iteration: t, loss });
        }
        let lr = cosine_lr(cfg.lr, t, cfg.iterations);
        if t % cfg.log_every == 0 || t + 1 == cfg.iterations {
            curve.push(LossPoint { iteration: t, loss, lr });
        }
        opt.step(&mut model, &grads, lr, cfg.weight_decay);
    }
    Ok(TrainOutcome { model, curve, seconds: start.elapsed().as_secs_f64() })
}
