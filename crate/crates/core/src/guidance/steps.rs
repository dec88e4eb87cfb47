use rand::Rng;

use super::{JacobianMode, NfeCounter, Observation, TfgConfig};
use crate::error::{invalid, Result};
use crate::flowmodel::VelocityModel;
use crate::rng::fill_normal;
use crate::schedule::{compose_row, StateBatch, StateTensor};

#[inline]
fn euler_value(z: f64, zhat: f64, s0: f64, s1: f64) -> f64 {
    if s1 == 0.0 {
        zhat
    } else {
        z + (s1 - s0) * (z - zhat) / s0
    }
}

/// `z + (σ₁ − σ₀)(z − ẑ0)/σ₀`; lands exactly on `ẑ0` when `σ₁ = 0`.
pub fn euler_step(z: &StateTensor, zhat: &StateTensor, s0: f64, s1: f64) -> Result<StateTensor> {
    if z.shape() != zhat.shape() {
        return Err(invalid("euler_step: shapes differ"));
    }
    let out = euler_step_batch(&StateBatch::from_tensor(z), &StateBatch::from_tensor(zhat), s0, s1)?;
    Ok(out.tensor(0))
}

pub fn euler_step_batch(z: &StateBatch, zhat: &StateBatch, s0: f64, s1: f64) -> Result<StateBatch> {
    if !(s0 > 0.0) {
        return Err(invalid(format!("euler step needs sigma_k > 0, got {s0}")));
    }
    z.check_like(zhat)?;
    let mut out = z.clone();
    for (o, &h) in out.data_mut().iter_mut().zip(zhat.data()) {
        *o = euler_value(*o, h, s0, s1);
    }
    Ok(out)
}

/// `M ⊙ z̃0 + (1 − M) ⊙ ẑ0` for every row.
pub fn outer_hard_replace(zhat: &StateBatch, obs: &Observation) -> Result<StateBatch> {
    obs.mask.check_shape(zhat.shape())?;
    let mut out = zhat.clone();
    for r in 0..out.rows() {
        compose_row(out.row_mut(r), obs.values.data(), zhat.shape(), &obs.mask);
    }
    Ok(out)
}

/// Residual `M ⊙ (ẑ0 − z̃0)`, zero off the mask.
fn masked_residual(zhat: &StateBatch, obs: &Observation) -> StateBatch {
    let coords = obs.mask.observed_coords(zhat.shape());
    let mut r = StateBatch::zeros(zhat.shape(), zhat.rows());
    for row in 0..zhat.rows() {
        let (src, dst) = (zhat.row(row), r.row_mut(row));
        for &i in &coords {
            dst[i] = src[i] - obs.values.data()[i];
        }
    }
    r
}

/// `u + coef · M ⊙ (ẑ0 − z̃0)` with `coef = scale · σσ̇/τ²`.
pub fn outer_soft_pull(
    u: &StateBatch,
    zhat: &StateBatch,
    obs: &Observation,
    sigma: f64,
    sigma_dot: f64,
    scale: f64,
) -> Result<StateBatch> {
    u.check_like(zhat)?;
    obs.mask.check_shape(u.shape())?;
    let tau = obs.require_tau()?;
    let coef = scale * sigma * sigma_dot / (tau * tau);
    let r = masked_residual(zhat, obs);
    let mut out = u.clone();
    for (o, x) in out.data_mut().iter_mut().zip(r.data()) {
        *o += coef * x;
    }
    Ok(out)
}

/// DPS velocity correction `ζ · (∂ẑ0/∂z)ᵀ M ⊙ (ẑ0 − z̃0)`, the negative
/// gradient of the Gaussian log-likelihood through the clean prediction, up to
/// the step scale. `stop_grad` replaces the Jacobian by the identity.
#[allow(clippy::too_many_arguments)]
pub fn dps_correction(
    model: &dyn VelocityModel,
    z: &StateBatch,
    zhat: &StateBatch,
    sigma: f64,
    obs: &Observation,
    zeta: f64,
    mode: JacobianMode,
    counters: &mut [NfeCounter],
) -> Result<StateBatch> {
    z.check_like(zhat)?;
    let r = masked_residual(zhat, obs);
    let mut g = match mode {
        JacobianMode::StopGrad => r,
        JacobianMode::FullVjp => {
            if !model.has_input_gradient() {
                return Err(crate::HctlError::Unsupported(format!(
                    "{:?} backend has no input gradient for full_vjp DPS",
                    model.backend()
                )));
            }
            let g = model.input_vjp(z, sigma, &r)?;
            for c in counters.iter_mut() {
                c.backward_calls += 1;
            }
            g
        }
    };
    for x in g.data_mut() {
        *x *= zeta;
    }
    Ok(g)
}

/// `u + λ_σ · M ⊙ ((z − z̃0)/σ − u)` with `λ_σ = σ^α`.
pub fn weighted_h_step(u: &StateBatch, z: &StateBatch, sigma: f64, obs: &Observation, alpha: f64) -> Result<StateBatch> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(invalid(format!("weighted_h needs sigma in (0, 1], got {sigma}")));
    }
    u.check_like(z)?;
    obs.mask.check_shape(u.shape())?;
    let lambda = sigma.powf(alpha);
    let coords = obs.mask.observed_coords(u.shape());
    let mut out = u.clone();
    for row in 0..u.rows() {
        let zr = z.row(row);
        let o = out.row_mut(row);
        for &i in &coords {
            o[i] += lambda * ((zr[i] - obs.values.data()[i]) / sigma - o[i]);
        }
    }
    Ok(out)
}

/// Reconstructed TFG-UGD outer step from `σ₀` to `σ₁`.
///
/// Each of the `n_recur` rounds evaluates `x0 = ẑ0(z)` (one forward), runs
/// `n_iter` mean-guidance iterations `Δ ← Δ + μ Jᵀ M ⊙ (z̃0 − (x0 + Δ))`
/// (one VJP each), takes the Euler step with `x0 + Δ`, and except in the last
/// round re-noises back to `σ₀` through the forward kernel. A final VJP at the
/// last round's point applies the z-space guidance
/// `z ← z + ρ (σ₁ − σ₀) ζ Jᵀ M ⊙ (ẑ0 − z̃0)`, `ζ = σ₀σ̇/τ²`.
#[allow(clippy::too_many_arguments)]
pub fn tfg_ugd_step<R: Rng + ?Sized>(
    model: &dyn VelocityModel,
    z: &StateBatch,
    s0: f64,
    s1: f64,
    sigma_dot: f64,
    obs: &Observation,
    cfg: &TfgConfig,
    rng: &mut R,
    counters: &mut [NfeCounter],
) -> Result<StateBatch> {
    if cfg.n_recur == 0 {
        return Err(invalid("tfg_ugd needs at least one recurrence round"));
    }
    let tau = obs.require_tau()?;
    let zeta = s0 * sigma_dot / (tau * tau);
    let bump = |cs: &mut [NfeCounter], fwd: bool| {
        for c in cs.iter_mut() {
            if fwd {
                c.forward_calls += 1
            } else {
                c.backward_calls += 1
            }
        }
    };
    let mut cur = z.clone();
    let mut last: Option<(StateBatch, StateBatch, StateBatch)> = None;
    for round in 1..=cfg.n_recur {
        let x0 = model.clean_prediction(&cur, s0)?;
        bump(counters, true);
        let mut guided = x0.clone();
        for _ in 0..cfg.n_iter {
            let mut pull = masked_residual(&guided, obs);
            for x in pull.data_mut() {
                *x = -*x;
            }
            let g = model.input_vjp(&cur, s0, &pull)?;
            bump(counters, false);
            for (d, v) in guided.data_mut().iter_mut().zip(g.data()) {
                *d += cfg.mu * v;
            }
        }
        let next = euler_step_batch(&cur, &guided, s0, s1)?;
        if round < cfg.n_recur {
            // Forward kernel from σ₁ back up to σ₀.
            let a = (1.0 - s0) / (1.0 - s1);
            let b = (s0 * s0 - a * a * s1 * s1).max(0.0).sqrt();
            let mut noise = vec![0.0; next.data().len()];
            fill_normal(rng, &mut noise);
            let mut renoised = next;
            for (x, e) in renoised.data_mut().iter_mut().zip(&noise) {
                *x = a * *x + b * e;
            }
            cur = renoised;
        } else {
            last = Some((cur.clone(), x0, next));
        }
    }
    let (point, x0, mut next) = last.expect("at least one round");
    let r = masked_residual(&x0, obs);
    let g = model.input_vjp(&point, s0, &r)?;
    bump(counters, false);
    let coef = cfg.rho * (s1 - s0) * zeta;
    for (x, v) in next.data_mut().iter_mut().zip(g.data()) {
        *x += coef * v;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{Shape, SiteMask};

    fn t(v: &[f64]) -> StateTensor {
        StateTensor::new(Shape::flat(v.len()), v.to_vec()).unwrap()
    }

    fn b(v: &[f64]) -> StateBatch {
        StateBatch::from_tensor(&t(v))
    }

    fn toy_obs(tau: Option<f64>) -> Observation {
        let mask = SiteMask::new((1, 1, 2), vec![true, false]).unwrap();
        Observation::new(mask, t(&[0.5, 0.0]), tau).unwrap()
    }

    #[test]
    fn euler_examples() {
        assert_eq!(euler_step(&t(&[2.0]), &t(&[0.0]), 1.0, 0.5).unwrap().data(), &[1.0]);
        assert_eq!(euler_step(&t(&[2.0]), &t(&[2.0]), 0.7, 0.3).unwrap().data(), &[2.0]);
        let z = euler_step(&t(&[2.0, 0.1]), &t(&[0.0, 0.3]), 0.02, 0.0).unwrap();
        assert_eq!(z.data(), &[0.0, 0.3]);
        assert!(euler_step(&t(&[1.0]), &t(&[0.0]), 0.0, 0.0).is_err());
    }

    #[test]
    fn hard_replace_examples() {
        let obs = toy_obs(None);
        assert_eq!(outer_hard_replace(&b(&[0.2, 0.7]), &obs).unwrap().data(), &[0.5, 0.7]);
        let all = Observation::new(SiteMask::filled((1, 1, 2), true), t(&[1.0, 2.0]), None).unwrap();
        assert_eq!(outer_hard_replace(&b(&[0.2, 0.7]), &all).unwrap().data(), &[1.0, 2.0]);
        let none = Observation::new(SiteMask::filled((1, 1, 2), false), t(&[1.0, 2.0]), None).unwrap();
        assert_eq!(outer_hard_replace(&b(&[0.2, 0.7]), &none).unwrap().data(), &[0.2, 0.7]);
    }

    #[test]
    fn soft_pull_examples() {
        let obs = toy_obs(Some(0.2));
        let u = b(&[0.3, -0.4]);
        let agree = outer_soft_pull(&u, &b(&[0.5, 9.0]), &obs, 0.8, 1.0, 1.0).unwrap();
        assert_eq!(agree, u);
        let pulled = outer_soft_pull(&u, &b(&[0.7, 9.0]), &obs, 0.8, 1.0, 1.0).unwrap();
        assert!((pulled.data()[0] - (0.3 + 0.8 / 0.04 * 0.2)).abs() < 1e-12);
        assert_eq!(pulled.data()[1], -0.4);
        let weak = outer_soft_pull(&u, &b(&[0.7, 9.0]), &toy_obs(Some(1e8)), 0.8, 1.0, 1.0).unwrap();
        assert!((weak.data()[0] - 0.3).abs() < 1e-12);
        assert!(outer_soft_pull(&u, &b(&[0.7, 9.0]), &toy_obs(None), 0.8, 1.0, 1.0).is_err());
    }

    #[test]
    fn weighted_h_examples() {
        let obs = toy_obs(None);
        let u = b(&[0.3, -0.4]);
        let z = b(&[1.5, 2.0]);
        let hard = weighted_h_step(&u, &z, 0.5, &obs, 0.0).unwrap();
        assert_eq!(hard.data(), &[(1.5 - 0.5) / 0.5, -0.4]);
        let tiny = weighted_h_step(&u, &z, 1e-12, &obs, 2.0).unwrap();
        assert!((tiny.data()[0] - 0.3).abs() < 1e-9);
    }
}
