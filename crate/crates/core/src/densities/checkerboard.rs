use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Eight unit squares centred at `(i + 0.5, j + 0.5)` for `i, j ∈ {−2, −1, 0, 1}`
/// with `i + j` even, uniform density `1/8` on their union.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkerboard {
    centers: Vec<[f64; 2]>,
}

impl Default for Checkerboard {
    fn default() -> Self {
        Self::new()
    }
}

/// Partial observation `y ~ N(z0[coord], σ_y²)` of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObsModel {
    #[serde(default)]
    pub coord: usize,
    #[serde(default = "ObsModel::default_sigma_y")]
    pub sigma_y: f64,
    #[serde(default = "ObsModel::default_y_obs")]
    pub y_obs: f64,
}

impl ObsModel {
    fn default_sigma_y() -> f64 {
        0.2
    }
    fn default_y_obs() -> f64 {
        0.5
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_y > 0.0) {
            return Err(invalid("observation noise sigma_y must be positive"));
        }
        if self.coord > 1 {
            return Err(invalid("checkerboard observations index coordinate 0 or 1"));
        }
        Ok(())
    }
}

impl Default for ObsModel {
    fn default() -> Self {
        Self { coord: 0, sigma_y: 0.2, y_obs: 0.5 }
    }
}

impl Checkerboard {
    pub fn new() -> Self {
        let mut centers = Vec::with_capacity(8);
        for i in -2i32..=1 {
            for j in -2i32..=1 {
                if (i + j).rem_euclid(2) == 0 {
                    centers.push([i as f64 + 0.5, j as f64 + 0.5]);
                }
            }
        }
        Self { centers }
    }

    pub fn centers(&self) -> &[[f64; 2]] {
        &self.centers
    }

    /// Index of the filled square containing `p` (closed lower, open upper edges).
    pub fn square_of(&self, p: [f64; 2]) -> Option<usize> {
        if !p[0].is_finite() || !p[1].is_finite() {
            return None;
        }
        let (i, j) = (p[0].floor(), p[1].floor());
        self.centers.iter().position(|c| c[0] - 0.5 == i && c[1] - 0.5 == j)
    }

    pub fn logdensity(&self, p: [f64; 2]) -> f64 {
        match self.square_of(p) {
            Some(_) => (1.0f64 / 8.0).ln(),
            None => f64::NEG_INFINITY,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| {
                let c = self.centers[rng.gen_range(0..self.centers.len())];
                [c[0] - 0.5 + rng.gen::<f64>(), c[1] - 0.5 + rng.gen::<f64>()]
            })
            .collect()
    }

    /// Filled squares whose extent along the observed coordinate contains `y_obs`,
    /// ordered by the other coordinate.
    pub fn conditional_modes(&self, obs: &ObsModel) -> Vec<usize> {
        let k = obs.coord;
        let mut modes: Vec<usize> = (0..self.centers.len())
            .filter(|&s| {
                let lo = self.centers[s][k] - 0.5;
                lo <= obs.y_obs && obs.y_obs < lo + 1.0
            })
            .collect();
        modes.sort_by(|&a, &b| self.centers[a][1 - k].total_cmp(&self.centers[b][1 - k]));
        modes
    }

    /// Exact draws from `p(z0 | y = y_obs)` by rejection: a uniform checkerboard
    /// proposal accepted with probability `exp(−(y_obs − z0[k])² / 2σ_y²)`.
    pub fn posterior_sample<R: Rng + ?Sized>(
        &self,
        obs: &ObsModel,
        n: usize,
        rng: &mut R,
    ) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(n);
        let inv = 1.0 / (2.0 * obs.sigma_y * obs.sigma_y);
        while out.len() < n {
            let p = self.sample(1, rng)[0];
            let r = obs.y_obs - p[obs.coord];
            if rng.gen::<f64>() < (-r * r * inv).exp() {
                out.push(p);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn eight_disjoint_squares() {
        let cb = Checkerboard::new();
        assert_eq!(cb.centers().len(), 8);
        let mean = cb.centers().iter().fold([0.0, 0.0], |a, c| [a[0] + c[0] / 8.0, a[1] + c[1] / 8.0]);
        assert_eq!(mean, [0.0, 0.0]);
        for (a, ca) in cb.centers().iter().enumerate() {
            for cb2 in &cb.centers()[a + 1..] {
                assert!((ca[0] - cb2[0]).abs() >= 1.0 || (ca[1] - cb2[1]).abs() >= 1.0);
            }
        }
    }

    #[test]
    fn logdensity_examples() {
        let cb = Checkerboard::new();
        assert_eq!(cb.logdensity([0.5, 0.5]), (0.125f64).ln());
        assert_eq!(cb.logdensity([0.5, 1.5]), f64::NEG_INFINITY);
        assert_eq!(cb.logdensity([3.0, 3.0]), f64::NEG_INFINITY);
        assert_eq!(cb.logdensity([f64::NAN, 0.5]), f64::NEG_INFINITY);
    }

    #[test]
    fn density_integrates_to_one() {
        let cb = Checkerboard::new();
        let h = 0.01;
        let mut mass = 0.0;
        let n = (8.0 / h) as i32;
        for a in 0..n {
            for b in 0..n {
                let p = [-4.0 + (a as f64 + 0.5) * h, -4.0 + (b as f64 + 0.5) * h];
                mass += cb.logdensity(p).exp() * h * h;
            }
        }
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn modes_for_anchor_values() {
        let cb = Checkerboard::new();
        let centers = |y: f64| -> Vec<[f64; 2]> {
            cb.conditional_modes(&ObsModel { y_obs: y, ..Default::default() })
                .into_iter()
                .map(|s| cb.centers()[s])
                .collect()
        };
        assert_eq!(centers(0.5), vec![[0.5, -1.5], [0.5, 0.5]]);
        assert!(centers(2.5).is_empty());
        assert_eq!(centers(-1.5), vec![[-1.5, -1.5], [-1.5, 0.5]]);
    }

    #[test]
    fn samples_are_on_support_and_balanced() {
        let cb = Checkerboard::new();
        let mut rng = stream(11, Stream::Data, 0);
        let n = 80_000;
        let pts = cb.sample(n, &mut rng);
        let mut counts = [0usize; 8];
        let mut mean = [0.0; 2];
        for p in &pts {
            counts[cb.square_of(*p).expect("on support")] += 1;
            mean[0] += p[0] / n as f64;
            mean[1] += p[1] / n as f64;
        }
        let p = 1.0 / 8.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
        // Per-coordinate variance of the mixture is 1.25 + 1/12.
        let se = ((1.25 + 1.0 / 12.0) / n as f64).sqrt();
        assert!(mean[0].abs() < 5.0 * se && mean[1].abs() < 5.0 * se, "{mean:?}");
    }

    #[test]
    fn posterior_oracle_is_balanced_between_modes() {
        let cb = Checkerboard::new();
        let obs = ObsModel::default();
        let mut rng = stream(5, Stream::Oracle, 0);
        let n = 20_000;
        let pts = cb.posterior_sample(&obs, n, &mut rng);
        let modes = cb.conditional_modes(&obs);
        let upper = pts.iter().filter(|p| cb.square_of(**p) == Some(modes[1])).count();
        let lower = pts.iter().filter(|p| cb.square_of(**p) == Some(modes[0])).count();
        let frac = upper as f64 / (upper + lower) as f64;
        assert!((frac - 0.5).abs() < 3.0 * (0.25 / (upper + lower) as f64).sqrt(), "{frac}");
    }
}
