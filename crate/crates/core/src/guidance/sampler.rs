use serde::{Deserialize, Serialize};

use super::inner::{inner_gibbs, InnerHooks};
use super::steps::{dps_correction, euler_step_batch, outer_hard_replace, outer_soft_pull, tfg_ugd_step, weighted_h_step};
use super::{GuidanceSpec, NfeCounter, Observation, OuterMode, Variant};
use crate::error::{invalid, Result};
use crate::flowmodel::VelocityModel;
use crate::rng::{fill_normal, SamplerStreams};
use crate::schedule::{compose_row, partition_complement, NoiseSchedule, StateBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub outer_step: usize,
    pub sigma: f64,
    /// Means over chains.
    pub inner_iters_used: f64,
    pub stable_fraction: f64,
    pub mean_abs_dw: f64,
    /// Cumulative per-chain model calls after this step, averaged over chains.
    pub nfe_forward: f64,
    pub nfe_backward: f64,
    /// Mean `|Δ_W|` at each inner iteration `j = 1..=J_max` (NaN: no reading).
    pub dw_by_iter: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub samples: StateBatch,
    /// Per-chain call counts.
    pub nfe: Vec<NfeCounter>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl SampleOutput {
    /// Mean per-chain NFE.
    pub fn mean_nfe(&self) -> f64 {
        self.nfe.iter().map(|c| c.nfe() as f64).sum::<f64>() / self.nfe.len().max(1) as f64
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Runs `rows` chains from pure noise to σ = 0 under `spec`. Guidance acts on
/// outer steps inside the spec's window; elsewhere the step is the plain Euler
/// update on the model's clean prediction. `obs` may be `None` only for
/// unguided runs.
pub fn sample(
    model: &dyn VelocityModel,
    schedule: &NoiseSchedule,
    obs: Option<&Observation>,
    spec: &GuidanceSpec,
    rows: usize,
    streams: &mut SamplerStreams,
) -> Result<SampleOutput> {
    let steps = schedule.steps();
    spec.validate(steps)?;
    let [ws, we] = spec.resolved_window(steps);
    let shape = model.shape();
    let guided = ws < we && spec.variant != Variant::None;
    let obs = match (obs, guided) {
        (Some(o), _) => {
            o.mask.check_shape(shape)?;
            Some(o)
        }
        (None, false) => None,
        (None, true) => return Err(invalid(format!("{} guidance needs an observation", spec.name()))),
    };
    let partition = match (&spec.variant, obs) {
        (Variant::HControl(c), Some(o)) => Some(partition_complement(&o.mask, c.patch_sizes)?),
        _ => None,
    };

    let mut z = StateBatch::zeros(shape, rows);
    fill_normal(&mut streams.init, z.data_mut());
    let mut nfe = vec![NfeCounter::default(); rows];
    let mut diagnostics = Vec::with_capacity(steps);

    for k in 0..steps {
        let (s0, s1) = (schedule.sigma(k), schedule.sigma(k + 1));
        let sd = schedule.sigma_dot(k);
        let in_window = guided && ws <= k && k < we;
        let mut diag = StepDiagnostics {
            outer_step: k,
            sigma: s0,
            inner_iters_used: 0.0,
            stable_fraction: f64::NAN,
            mean_abs_dw: f64::NAN,
            nfe_forward: 0.0,
            nfe_backward: 0.0,
            dw_by_iter: Vec::new(),
        };

        if let (true, Variant::TfgUgd(cfg), Some(o)) = (in_window, &spec.variant, obs) {
            z = tfg_ugd_step(model, &z, s0, s1, sd, o, cfg, &mut streams.recon, &mut nfe)?;
        } else {
            let u = model.velocity(&z, s0)?;
            for c in nfe.iter_mut() {
                c.forward_calls += 1;
            }
            let from_velocity = |u: &StateBatch| {
                let mut out = z.clone();
                for (o, v) in out.data_mut().iter_mut().zip(u.data()) {
                    *o -= s0 * v;
                }
                out
            };
            let zhat = from_velocity(&u);
            let zfinal = match (in_window, &spec.variant, obs) {
                (true, Variant::HardReplace, Some(o)) => outer_hard_replace(&zhat, o)?,
                (true, Variant::SoftPull { pull_scale }, Some(o)) => {
                    from_velocity(&outer_soft_pull(&u, &zhat, o, s0, sd, *pull_scale)?)
                }
                (true, Variant::Dps { zeta, jacobian_mode }, Some(o)) => {
                    let zeta = match zeta {
                        Some(v) => *v,
                        None => {
                            let tau = o.require_tau()?;
                            s0 * sd / (tau * tau)
                        }
                    };
                    let corr = dps_correction(model, &z, &zhat, s0, o, zeta, *jacobian_mode, &mut nfe)?;
                    let mut uc = u.clone();
                    for (a, b) in uc.data_mut().iter_mut().zip(corr.data()) {
                        *a += b;
                    }
                    from_velocity(&uc)
                }
                (true, Variant::WeightedH { alpha }, Some(o)) => from_velocity(&weighted_h_step(&u, &z, s0, o, *alpha)?),
                (true, Variant::HControl(cfg), Some(o)) => {
                    let zhat_obs = match cfg.outer_mode {
                        OuterMode::Hard => outer_hard_replace(&zhat, o)?,
                        OuterMode::Soft => from_velocity(&outer_soft_pull(&u, &zhat, o, s0, sd, cfg.pull_scale)?),
                    };
                    let part = partition.as_ref().expect("partition built for h_control");
                    let inner = inner_gibbs(
                        model,
                        &zhat_obs,
                        o,
                        s0,
                        cfg,
                        part,
                        &mut streams.pin,
                        &mut streams.inner,
                        &mut nfe,
                        InnerHooks::default(),
                    )?;
                    diag.inner_iters_used = mean(inner.iterations.iter().map(|&j| j as f64));
                    diag.stable_fraction = mean(inner.stable_fraction.iter().copied());
                    diag.mean_abs_dw = mean(inner.mean_abs_dw.iter().copied().filter(|x| x.is_finite()));
                    diag.dw_by_iter = inner.mean_abs_dw;
                    // Write-back: observed sites from the outer step, the rest
                    // from the inner readout.
                    let mut out = inner.readout;
                    for r in 0..rows {
                        compose_row(out.row_mut(r), zhat_obs.row(r), shape, &o.mask);
                    }
                    out
                }
                _ => zhat,
            };
            z = euler_step_batch(&z, &zfinal, s0, s1)?;
        }
        if !z.all_finite() {
            return Err(crate::HctlError::Numerical(format!("non-finite state after outer step {k}")));
        }
        diag.nfe_forward = mean(nfe.iter().map(|c| c.forward_calls as f64));
        diag.nfe_backward = mean(nfe.iter().map(|c| c.backward_calls as f64));
        diagnostics.push(diag);
    }
    Ok(SampleOutput { samples: z, nfe, diagnostics })
}
