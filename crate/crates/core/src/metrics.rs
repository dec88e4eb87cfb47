//! Sample-quality metrics: checkerboard hit rates, energy distance with a
//! permutation null, Gaussian law agreement, Polyak variance reduction and
//! Δ-Welford summaries.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::densities::{Checkerboard, ObsModel};
use crate::error::{invalid, HctlError, Result};
use crate::flowmodel::VelocityModel;
use crate::guidance::{
    inner_gibbs, HControlConfig, InnerHooks, InnerStep, NfeCounter, Observation, Readout, StepDiagnostics,
};
use crate::schedule::{partition_complement, StateBatch, StateTensor};

/// Fraction of points inside a filled checkerboard square.
pub fn manifold_hit(points: &[[f64; 2]]) -> Result<f64> {
    if points.is_empty() {
        return Err(HctlError::UndefinedRate("manifold hit of an empty sample".into()));
    }
    let cb = Checkerboard::new();
    let hits = points.iter().filter(|p| cb.square_of(**p).is_some()).count();
    Ok(hits as f64 / points.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HitReport {
    pub n_samples: usize,
    pub manifold_hits: usize,
    pub posterior_hits: usize,
    /// Hits in the lower and upper conditional mode square.
    pub mode_counts: [usize; 2],
    pub manifold_rate: f64,
    pub posterior_rate: f64,
    /// Share of posterior hits in the upper mode; NaN without hits.
    pub mode_balance: f64,
}

/// Posterior hit: inside one of the two squares the constraint line crosses
/// and within 0.5 of `y_obs` along the observed coordinate.
pub fn posterior_hit(points: &[[f64; 2]], obs: &ObsModel) -> Result<HitReport> {
    if points.is_empty() {
        return Err(HctlError::UndefinedRate("posterior hit of an empty sample".into()));
    }
    obs.validate()?;
    let cb = Checkerboard::new();
    let modes = cb.conditional_modes(obs);
    let mut manifold_hits = 0;
    let mut mode_counts = [0usize; 2];
    for p in points {
        let Some(sq) = cb.square_of(*p) else { continue };
        manifold_hits += 1;
        if (p[obs.coord] - obs.y_obs).abs() >= 0.5 {
            continue;
        }
        if let Some(m) = modes.iter().position(|&s| s == sq) {
            mode_counts[m.min(1)] += 1;
        }
    }
    let posterior_hits = mode_counts[0] + mode_counts[1];
    let n = points.len();
    Ok(HitReport {
        n_samples: n,
        manifold_hits,
        posterior_hits,
        mode_counts,
        manifold_rate: manifold_hits as f64 / n as f64,
        posterior_rate: posterior_hits as f64 / n as f64,
        mode_balance: if posterior_hits == 0 { f64::NAN } else { mode_counts[1] as f64 / posterior_hits as f64 },
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_points<P: AsRef<[f64]>>(x: &[P], y: &[P]) -> Result<usize> {
    if x.len() < 2 || y.len() < 2 {
        return Err(invalid("energy distance needs at least two points per sample"));
    }
    let d = x[0].as_ref().len();
    if x.iter().chain(y.iter()).any(|p| p.as_ref().len() != d) {
        return Err(invalid("energy distance: points differ in dimension"));
    }
    Ok(d)
}

/// Energy distance `2 E‖x−y‖ − E‖x−x′‖ − E‖y−y′‖` with all-pairs (V-statistic)
/// means, which is zero for identical samples and never negative.
pub fn energy_distance<P: AsRef<[f64]>>(x: &[P], y: &[P]) -> Result<f64> {
    check_points(x, y)?;
    let mean_pairs = |a: &[P], b: &[P]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += dist(p.as_ref(), q.as_ref());
            }
        }
        s / (a.len() * b.len()) as f64
    };
    Ok(2.0 * mean_pairs(x, y) - mean_pairs(x, x) - mean_pairs(y, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    pub statistic: f64,
    /// 95th percentile of the permutation null.
    pub null_q95: f64,
    pub p_value: f64,
    pub permutations: usize,
}

/// Energy distance with a label-permutation null over the pooled sample.
pub fn energy_permutation_test<P: AsRef<[f64]>, R: Rng + ?Sized>(
    x: &[P],
    y: &[P],
    permutations: usize,
    rng: &mut R,
) -> Result<EnergyTest> {
    check_points(x, y)?;
    if permutations == 0 {
        return Err(invalid("permutation test needs at least one permutation"));
    }
    let pooled: Vec<&[f64]> = x.iter().chain(y.iter()).map(|p| p.as_ref()).collect();
    let n = pooled.len();
    let mut dm = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(pooled[i], pooled[j]);
            dm[i * n + j] = v;
            dm[j * n + i] = v;
        }
    }
    let total: f64 = dm.iter().sum();
    let nx = x.len();
    let stat_for = |labels: &[bool]| {
        let (mut sa, mut sb) = (0.0, 0.0);
        for i in 0..n {
            let row = &dm[i * n..(i + 1) * n];
            let li = labels[i];
            let s: f64 = row.iter().zip(labels).filter(|(_, &l)| l == li).map(|(v, _)| v).sum();
            if li {
                sa += s;
            } else {
                sb += s;
            }
        }
        let cross = (total - sa - sb) / 2.0;
        let (na, nb) = (nx as f64, (n - nx) as f64);
        2.0 * cross / (na * nb) - sa / (na * na) - sb / (nb * nb)
    };
    let mut labels: Vec<bool> = (0..n).map(|i| i < nx).collect();
    let statistic = stat_for(&labels);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        labels.shuffle(rng);
        null.push(stat_for(&labels));
    }
    null.sort_by(f64::total_cmp);
    let q_idx = ((0.95 * permutations as f64).ceil() as usize).clamp(1, permutations) - 1;
    let exceed = null.iter().filter(|&&v| v >= statistic).count();
    Ok(EnergyTest {
        statistic,
        null_q95: null[q_idx],
        p_value: (exceed + 1) as f64 / (permutations + 1) as f64,
        permutations,
    })
}

/// Per-coordinate z-scores of the sample mean against `reference`, with the
/// standard error estimated by non-overlapping batch means (robust to serial
/// correlation in chain output).
pub fn batch_means_zscores(samples: &[Vec<f64>], reference: &[f64], batches: usize) -> Result<Vec<f64>> {
    let n = samples.len();
    if batches < 2 || n < 2 * batches {
        return Err(invalid("need at least two batches of two samples"));
    }
    let d = reference.len();
    let per = n / batches;
    let mut batch_means = vec![vec![0.0; d]; batches];
    for (b, bm) in batch_means.iter_mut().enumerate() {
        for s in &samples[b * per..(b + 1) * per] {
            for i in 0..d {
                bm[i] += s[i] / per as f64;
            }
        }
    }
    Ok((0..d)
        .map(|i| {
            let m = batch_means.iter().map(|b| b[i]).sum::<f64>() / batches as f64;
            let v = batch_means.iter().map(|b| (b[i] - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
            (m - reference[i]) / (v / batches as f64).sqrt()
        })
        .collect())
}

/// `‖Ĉ − C‖_F / ‖C‖_F` for the unbiased sample covariance `Ĉ`.
pub fn covariance_relative_error(samples: &[Vec<f64>], reference: &nalgebra::DMatrix<f64>) -> Result<f64> {
    let d = reference.nrows();
    if samples.len() < 2 || samples.iter().any(|s| s.len() != d) {
        return Err(invalid("covariance needs at least two samples of the reference dimension"));
    }
    let flat: Vec<f64> = samples.iter().flatten().copied().collect();
    let (_, cov) = crate::linalg::sample_mean_cov(&flat, d);
    Ok((cov - reference).norm() / reference.norm())
}

/// Variance reduction of the Polyak readout over the last iterate.
///
/// Runs `repeats` independent inner chains of `j` iterations (freezing off)
/// from a shared start and a shared noised pin, and returns the mean over
/// unobserved coordinates of `Var(Polyak readout) / Var(last iterate)`.
#[allow(clippy::too_many_arguments)]
pub fn polyak_variance_ratio(
    model: &dyn VelocityModel,
    obs: &Observation,
    start: &StateTensor,
    sigma: f64,
    j: usize,
    repeats: usize,
    cfg: &HControlConfig,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if j == 0 || repeats < 2 {
        return Err(invalid("polyak_variance_ratio needs j >= 1 and at least two chains"));
    }
    let cfg = HControlConfig { j_max: j, freeze: false, readout: Readout::Polyak, ..*cfg };
    let shape = start.shape();
    let partition = partition_complement(&obs.mask, cfg.patch_sizes)?;
    // One shared pin drawn up front.
    let mut xi = vec![0.0; shape.len()];
    crate::rng::fill_normal(rng, &mut xi);
    let mut pin = StateBatch::zeros(shape, 1);
    for &i in &obs.mask.observed_coords(shape) {
        pin.row_mut(0)[i] = (1.0 - sigma) * obs.values.data()[i] + sigma * xi[i];
    }
    let starts = StateBatch::broadcast(start, repeats);
    let mut counters = vec![NfeCounter::default(); repeats];
    let mut last: Option<StateBatch> = None;
    let mut keep_last = |step: &InnerStep<'_>| {
        if step.j == j {
            last = Some(step.iterate.clone());
        }
    };
    let mut unused_pin_rng = rand::rngs::mock::StepRng::new(0, 0);
    let out = inner_gibbs(
        model,
        &starts,
        obs,
        sigma,
        &cfg,
        &partition,
        &mut unused_pin_rng,
        rng,
        &mut counters,
        InnerHooks { pin: Some(&pin), observer: Some(&mut keep_last) },
    )?;
    let last = last.ok_or_else(|| HctlError::Numerical("inner chain produced no iterate".into()))?;
    let coords = obs.mask.unobserved_coords(shape);
    if coords.is_empty() {
        return Err(invalid("no unobserved coordinates to compare"));
    }
    let var = |b: &StateBatch, i: usize| {
        let m = (0..repeats).map(|r| b.row(r)[i]).sum::<f64>() / repeats as f64;
        (0..repeats).map(|r| (b.row(r)[i] - m).powi(2)).sum::<f64>() / (repeats - 1) as f64
    };
    let ratios: Vec<f64> = coords
        .iter()
        .map(|&i| {
            let vl = var(&last, i);
            if vl == 0.0 {
                1.0
            } else {
                var(&out.readout, i) / vl
            }
        })
        .collect();
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Noise-band edges for binning outer steps by σ: `[0, 0.33), [0.33, 0.66), [0.66, 1]`.
pub const DEFAULT_BAND_EDGES: [f64; 4] = [0.0, 0.33, 0.66, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub band_edges: Vec<f64>,
    /// `dw_by_band[b][j-1]`: mean `|Δ_W^(j)|` over windowed steps in band `b`.
    pub dw_by_band: Vec<Vec<f64>>,
    /// Realized inner iterations per outer step.
    pub inner_iters: Vec<f64>,
    pub stable_fraction: Vec<f64>,
}

impl ChainDiagnostics {
    pub fn from_steps(steps: &[StepDiagnostics], band_edges: &[f64]) -> Result<Self> {
        if band_edges.len() < 2 || band_edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("band edges must be increasing with at least two entries"));
        }
        let bands = band_edges.len() - 1;
        let jmax = steps.iter().map(|s| s.dw_by_iter.len()).max().unwrap_or(0);
        let mut sums = vec![vec![(0.0, 0usize); jmax]; bands];
        for s in steps {
            let b = (0..bands)
                .find(|&b| s.sigma >= band_edges[b] && (s.sigma < band_edges[b + 1] || b + 1 == bands))
                .unwrap_or(bands - 1);
            for (j, &v) in s.dw_by_iter.iter().enumerate() {
                if v.is_finite() {
                    sums[b][j].0 += v;
                    sums[b][j].1 += 1;
                }
            }
        }
        Ok(Self {
            band_edges: band_edges.to_vec(),
            dw_by_band: sums
                .into_iter()
                .map(|row| row.into_iter().map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 }).collect())
                .collect(),
            inner_iters: steps.iter().map(|s| s.inner_iters_used).collect(),
            stable_fraction: steps.iter().map(|s| s.stable_fraction).collect(),
        })
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    let s = if xs.len() > 1 { (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normal, stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn manifold_hit_examples() {
        assert_eq!(manifold_hit(&[[0.5, 0.5]; 4]).unwrap(), 1.0);
        assert_eq!(manifold_hit(&[[0.5, 1.5]; 4]).unwrap(), 0.0);
        let pts = Checkerboard::new().sample(2000, &mut stream(1, Stream::Data, 0));
        assert_eq!(manifold_hit(&pts).unwrap(), 1.0);
        assert!(matches!(manifold_hit(&[]), Err(HctlError::UndefinedRate(_))));
    }

    #[test]
    fn posterior_hit_examples() {
        let obs = ObsModel::default();
        let r = posterior_hit(&[[0.5, 0.5]], &obs).unwrap();
        assert_eq!((r.posterior_hits, r.mode_counts), (1, [0, 1]));
        assert_eq!(posterior_hit(&[[0.5, 1.6]], &obs).unwrap().posterior_hits, 0);
        let r = posterior_hit(&[[-0.5, -0.5]], &obs).unwrap();
        assert_eq!((r.manifold_hits, r.posterior_hits), (1, 0));
        let r = posterior_hit(&[[0.2, -1.2], [0.9, 0.1], [0.9, 1.1]], &obs).unwrap();
        assert_eq!(r.mode_counts, [1, 1]);
        assert_eq!(r.mode_balance, 0.5);
    }

    #[test]
    fn energy_distance_examples() {
        let mut rng = stream(2, Stream::Data, 0);
        let mut a = vec![0.0; 1000];
        fill_normal(&mut rng, &mut a);
        let x: Vec<Vec<f64>> = a.iter().map(|&v| vec![v]).collect();
        assert!(energy_distance(&x, &x).unwrap().abs() < 1e-12);
        let y: Vec<Vec<f64>> = x.iter().map(|v| vec![v[0] + 10.0]).collect();
        assert!(energy_distance(&x, &y).unwrap() > 15.0);
        assert!((energy_distance(&x, &y).unwrap() - energy_distance(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn permutation_test_separates_shifted_samples() {
        let mut rng = stream(3, Stream::Data, 0);
        let mut a = vec![0.0; 400];
        fill_normal(&mut rng, &mut a);
        let x: Vec<Vec<f64>> = a[..200].iter().map(|&v| vec![v]).collect();
        let y: Vec<Vec<f64>> = a[200..].iter().map(|&v| vec![v]).collect();
        let same = energy_permutation_test(&x, &y, 200, &mut rng).unwrap();
        assert!((same.statistic - energy_distance(&x, &y).unwrap()).abs() < 1e-9);
        let far: Vec<Vec<f64>> = y.iter().map(|v| vec![v[0] + 1.0]).collect();
        let shifted = energy_permutation_test(&x, &far, 200, &mut rng).unwrap();
        assert!(shifted.statistic > shifted.null_q95 && shifted.p_value < 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn energy_distance_nonnegative(seed in any::<u64>(), n in 2usize..12, m in 2usize..12) {
            let mut rng = stream(seed, Stream::Data, 0);
            let mut draw = |k: usize| -> Vec<Vec<f64>> {
                (0..k).map(|_| { let mut v = vec![0.0; 2]; fill_normal(&mut rng, &mut v); v }).collect()
            };
            let (x, y) = (draw(n), draw(m));
            prop_assert!(energy_distance(&x, &y).unwrap() >= -1e-10);
        }

        #[test]
        fn posterior_hits_are_manifold_hits(x in -3f64..3.0, y in -3f64..3.0) {
            let r = posterior_hit(&[[x, y]], &ObsModel::default()).unwrap();
            prop_assert!(r.posterior_hits <= r.manifold_hits);
        }
    }

    #[test]
    fn band_binning() {
        let step = |sigma: f64, v: f64| StepDiagnostics {
            outer_step: 0,
            sigma,
            inner_iters_used: 2.0,
            stable_fraction: 0.0,
            mean_abs_dw: v,
            nfe_forward: 0.0,
            nfe_backward: 0.0,
            dw_by_iter: vec![f64::NAN, v],
        };
        let d = ChainDiagnostics::from_steps(&[step(0.1, 1.0), step(0.2, 3.0), step(1.0, 5.0)], &DEFAULT_BAND_EDGES).unwrap();
        assert_eq!(d.dw_by_band[0][1], 2.0);
        assert!(d.dw_by_band[1][1].is_nan());
        assert_eq!(d.dw_by_band[2][1], 5.0);
    }
}
