use rand::RngCore;

use super::{HControlConfig, InnerRecon, NfeCounter, Observation, PatchWelford, Readout};
use crate::error::{invalid, Result};
use crate::flowmodel::VelocityModel;
use crate::rng::fill_normal;
use crate::schedule::{PatchPartition, StateBatch};

/// Optional controls for [`inner_gibbs`].
#[derive(Default)]
pub struct InnerHooks<'a> {
    /// Fixed noised pin (one row, or one per chain) instead of a fresh draw.
    pub pin: Option<&'a StateBatch>,
    /// Called after every iteration.
    pub observer: Option<&'a mut dyn FnMut(&InnerStep<'_>)>,
}

/// Snapshot handed to an [`InnerHooks`] observer after iteration `j`.
pub struct InnerStep<'a> {
    pub j: usize,
    /// Chains that ran this iteration, as row indices.
    pub active: &'a [usize],
    /// Perturbed states fed to the model, one row per active chain.
    pub probe: &'a StateBatch,
    /// Post-freeze iterates of all chains.
    pub iterate: &'a StateBatch,
    /// Per-chain, per-patch stable flags after this iteration.
    pub stable: &'a [Vec<bool>],
}

#[derive(Debug, Clone)]
pub struct InnerOutcome {
    /// Polyak mean or last iterate, per the readout mode.
    pub readout: StateBatch,
    /// Iterations each chain ran.
    pub iterations: Vec<usize>,
    /// Fraction of stable patches per chain at its last iteration.
    pub stable_fraction: Vec<f64>,
    /// Mean `|Δ_W|` over running chains and patches at each `j = 1..=J_max`;
    /// NaN where no reading exists.
    pub mean_abs_dw: Vec<f64>,
}

/// Inner pseudo-Gibbs refinement on the unobserved support at noise level σ,
/// one chain per row of `zhat_obs`.
#[allow(clippy::too_many_arguments)]
pub fn inner_gibbs(
    model: &dyn VelocityModel,
    zhat_obs: &StateBatch,
    obs: &Observation,
    sigma: f64,
    cfg: &HControlConfig,
    partition: &PatchPartition,
    pin_rng: &mut dyn RngCore,
    inner_rng: &mut dyn RngCore,
    counters: &mut [NfeCounter],
    hooks: InnerHooks<'_>,
) -> Result<InnerOutcome> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(invalid(format!("inner chain needs sigma in (0, 1], got {sigma}")));
    }
    cfg.validate()?;
    let shape = zhat_obs.shape();
    obs.mask.check_shape(shape)?;
    let rows = zhat_obs.rows();
    let d = zhat_obs.dim();
    if counters.len() != rows {
        return Err(invalid("one NFE counter per chain is required"));
    }
    if cfg.inner_recon == InnerRecon::PosteriorSample && !model.has_posterior_sampler() {
        return Err(crate::HctlError::Unsupported(format!(
            "{:?} backend cannot draw posterior reconstructions",
            model.backend()
        )));
    }
    let groups = partition.count();
    if cfg.j_max == 0 || groups == 0 {
        return Ok(InnerOutcome {
            readout: zhat_obs.clone(),
            iterations: vec![0; rows],
            stable_fraction: vec![0.0; rows],
            mean_abs_dw: vec![f64::NAN; cfg.j_max],
        });
    }

    let observed = obs.mask.observed_coords(shape);
    let free = obs.mask.unobserved_coords(shape);
    let patches = partition.patch_coords(shape);

    let pin = match hooks.pin {
        Some(p) => {
            if p.shape() != shape || (p.rows() != 1 && p.rows() != rows) {
                return Err(invalid("pin override must have one row or one row per chain"));
            }
            p.clone()
        }
        None => {
            let mut xi = vec![0.0; rows * d];
            fill_normal(pin_rng, &mut xi);
            let mut p = StateBatch::zeros(shape, rows);
            for r in 0..rows {
                let row = p.row_mut(r);
                for &i in &observed {
                    row[i] = (1.0 - sigma) * obs.values.data()[i] + sigma * xi[r * d + i];
                }
            }
            p
        }
    };
    let pin_row = |r: usize| if pin.rows() == 1 { pin.row(0) } else { pin.row(r) };

    let mut current = zhat_obs.clone();
    let mut mean = StateBatch::zeros(shape, rows);
    let mut welford = vec![vec![PatchWelford::new(cfg.kappa); groups]; rows];
    let mut iterations = vec![0usize; rows];
    let mut stable_fraction = vec![0.0; rows];
    let mut active: Vec<usize> = (0..rows).collect();
    let mut mean_abs_dw = vec![f64::NAN; cfg.j_max];
    let mut observer = hooks.observer;
    let mut xi = vec![0.0; rows * d];
    let mut flags = vec![vec![false; groups]; rows];

    for j in 1..=cfg.j_max {
        if active.is_empty() {
            break;
        }
        // Fresh perturbation noise for every chain keeps streams aligned
        // across runs that exit at different iterations.
        fill_normal(inner_rng, &mut xi);
        let mut probe = StateBatch::zeros(shape, active.len());
        for (a, &r) in active.iter().enumerate() {
            let src = current.row(r);
            let dst = probe.row_mut(a);
            for &i in &free {
                dst[i] = (1.0 - sigma) * src[i] + sigma * xi[r * d + i];
            }
            let p = pin_row(r);
            for &i in &observed {
                dst[i] = p[i];
            }
        }
        let fresh = match cfg.inner_recon {
            InnerRecon::Mean => model.clean_prediction(&probe, sigma)?,
            InnerRecon::PosteriorSample => model.posterior_sample(&probe, sigma, inner_rng)?,
        };
        if !fresh.all_finite() {
            return Err(crate::HctlError::Numerical(format!("non-finite reconstruction at inner iteration {j}")));
        }

        let (mut dw_sum, mut dw_n) = (0.0, 0usize);
        let mut still = Vec::with_capacity(active.len());
        for (a, &r) in active.iter().enumerate() {
            counters[r].forward_calls += 1;
            iterations[r] = j;
            let new = fresh.row(a);
            let mut stable = 0usize;
            for (g, coords) in patches.iter().enumerate() {
                let w = &mut welford[r][g];
                for &i in coords {
                    w.push(new[i]);
                }
                if let Some(dw) = w.end_iteration() {
                    dw_sum += dw.abs();
                    dw_n += 1;
                }
                flags[r][g] = w.is_stable();
                if flags[r][g] {
                    stable += 1;
                }
            }
            let row = current.row_mut(r);
            let old = row.to_vec();
            row.copy_from_slice(new);
            if cfg.freeze {
                for (g, coords) in patches.iter().enumerate() {
                    if welford[r][g].is_stable() {
                        for &i in coords {
                            row[i] = old[i];
                        }
                    }
                }
            }
            let m = mean.row_mut(r);
            for (mv, &x) in m.iter_mut().zip(row.iter()) {
                *mv += (x - *mv) / j as f64;
            }
            let frac = stable as f64 / groups as f64;
            stable_fraction[r] = frac;
            if !(cfg.freeze && frac > cfg.nu) {
                still.push(r);
            }
        }
        if dw_n > 0 {
            mean_abs_dw[j - 1] = dw_sum / dw_n as f64;
        }
        if let Some(f) = observer.as_mut() {
            f(&InnerStep { j, active: &active, probe: &probe, iterate: &current, stable: &flags });
        }
        active = still;
    }

    let readout = match cfg.readout {
        Readout::Polyak => mean,
        Readout::Last => current,
    };
    Ok(InnerOutcome { readout, iterations, stable_fraction, mean_abs_dw })
}
