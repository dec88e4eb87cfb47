use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HctlError, Result};
use crate::linalg::{cholesky_lower, spd_inverse, submatrix, symmetrize};
use crate::rng::fill_normal;
use crate::schedule::{Shape, SiteMask, StateTensor};

/// Serializable parameters of a lattice GMRF with precision
/// `Q = τ_d·I − β₁·A₁ − β₂·A₂`, where `A₁` links sites one step apart along a
/// single axis and `A₂` links sites two steps apart along a single axis.
/// Fields missing from a serialized document take the [`Default`] values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmrfParams {
    pub shape: (usize, usize, usize),
    pub beta1: f64,
    pub beta2: f64,
    pub tau_d: f64,
}

impl Default for GmrfParams {
    fn default() -> Self {
        Self { shape: (4, 4, 4), beta1: 0.12, beta2: 0.04, tau_d: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct GmrfSpec {
    params: GmrfParams,
    precision: DMatrix<f64>,
    covariance: DMatrix<f64>,
    cov_chol: DMatrix<f64>,
    band: usize,
}

impl GmrfSpec {
    pub fn build(params: GmrfParams) -> Result<Self> {
        let (l, h, w) = params.shape;
        if l * h * w == 0 {
            return Err(invalid("GMRF lattice must be non-empty"));
        }
        if !(params.tau_d.is_finite() && params.beta1.is_finite() && params.beta2.is_finite()) {
            return Err(invalid("GMRF parameters must be finite"));
        }
        let shape = Shape::new(1, l, h, w);
        let d = shape.sites();
        let mut q = DMatrix::<f64>::identity(d, d) * params.tau_d;
        for site in 0..d {
            let (a, b, c) = shape.site_coords(site);
            for (step, beta) in [(1usize, params.beta1), (2, params.beta2)] {
                if beta == 0.0 {
                    continue;
                }
                let mut link = |aa: usize, bb: usize, cc: usize| {
                    let other = shape.site_index(aa, bb, cc);
                    q[(site, other)] -= beta;
                };
                if a + step < l {
                    link(a + step, b, c);
                }
                if a >= step {
                    link(a - step, b, c);
                }
                if b + step < h {
                    link(a, b + step, c);
                }
                if b >= step {
                    link(a, b - step, c);
                }
                if c + step < w {
                    link(a, b, c + step);
                }
                if c >= step {
                    link(a, b, c - step);
                }
            }
        }
        let mut covariance = spd_inverse(&q, "GMRF precision")
            .map_err(|_| HctlError::Numerical("GMRF precision is not positive definite".into()))?;
        symmetrize(&mut covariance);
        let cov_chol = cholesky_lower(&covariance, "GMRF covariance")?;
        let band = if params.beta2 != 0.0 {
            2
        } else if params.beta1 != 0.0 {
            1
        } else {
            0
        };
        Ok(Self { params, precision: q, covariance, cov_chol, band })
    }

    pub fn params(&self) -> GmrfParams {
        self.params
    }

    pub fn shape(&self) -> Shape {
        let (l, h, w) = self.params.shape;
        Shape::new(1, l, h, w)
    }

    pub fn dim(&self) -> usize {
        self.precision.nrows()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn band(&self) -> usize {
        self.band
    }

    /// Manhattan distance between two sites on the lattice.
    pub fn graph_distance(&self, i: usize, j: usize) -> usize {
        let s = self.shape();
        let (a, b, c) = s.site_coords(i);
        let (x, y, z) = s.site_coords(j);
        a.abs_diff(x) + b.abs_diff(y) + c.abs_diff(z)
    }

    /// Exact draws `z ~ N(0, Σ)` as `L ε` with `L Lᵀ = Σ`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<StateTensor> {
        let d = self.dim();
        let mut eps = vec![0.0; d];
        (0..n)
            .map(|_| {
                fill_normal(rng, &mut eps);
                let z = &self.cov_chol * DVector::from_column_slice(&eps);
                StateTensor::new(self.shape(), z.as_slice().to_vec()).expect("finite sample")
            })
            .collect()
    }

    /// The law of the unobserved block of `z0` given the noised observation
    /// `z̄ = (1 − σ) z0|_M + σ ξ = pin`.
    pub fn conditional_oracle(&self, mask: &SiteMask, pin: &[f64], sigma: f64) -> Result<GaussianConditional> {
        mask.check_shape(self.shape())?;
        if !(sigma > 0.0 && sigma <= 1.0) {
            return Err(invalid("oracle noise level must lie in (0, 1]"));
        }
        let obs = mask.observed_sites();
        let free = mask.unobserved_sites();
        if pin.len() != obs.len() {
            return Err(invalid(format!("pin has {} values for {} observed sites", pin.len(), obs.len())));
        }
        let s_cc = submatrix(&self.covariance, &free, &free);
        if free.is_empty() || obs.is_empty() {
            return Ok(GaussianConditional { sites: free.clone(), mean: DVector::zeros(free.len()), cov: s_cc });
        }
        let a = 1.0 - sigma;
        let s_mm = submatrix(&self.covariance, &obs, &obs);
        let s_cm = submatrix(&self.covariance, &free, &obs);
        let cov_y = s_mm * (a * a) + DMatrix::identity(obs.len(), obs.len()) * (sigma * sigma);
        let cross = s_cm * a;
        let chol = cov_y
            .cholesky()
            .ok_or_else(|| HctlError::Numerical("singular observation covariance".into()))?;
        let gain_t = chol.solve(&cross.transpose());
        let mean = gain_t.transpose() * DVector::from_column_slice(pin);
        let mut cov = &s_cc - &cross * &gain_t;
        symmetrize(&mut cov);
        Ok(GaussianConditional { sites: free, mean, cov })
    }

    /// The law of the unobserved block given `y = z0|_M + τ η` on the observed
    /// sites; `tau = None` conditions on exact values.
    pub fn evidence_conditional(&self, mask: &SiteMask, values: &[f64], tau: Option<f64>) -> Result<GaussianConditional> {
        mask.check_shape(self.shape())?;
        let obs = mask.observed_sites();
        let free = mask.unobserved_sites();
        if values.len() != obs.len() {
            return Err(invalid(format!("{} values for {} observed sites", values.len(), obs.len())));
        }
        let s_cc = submatrix(&self.covariance, &free, &free);
        if free.is_empty() || obs.is_empty() {
            return Ok(GaussianConditional { sites: free.clone(), mean: DVector::zeros(free.len()), cov: s_cc });
        }
        let s_cm = submatrix(&self.covariance, &free, &obs);
        let noise = tau.map_or(0.0, |t| t * t);
        let cov_y = submatrix(&self.covariance, &obs, &obs) + DMatrix::identity(obs.len(), obs.len()) * noise;
        let chol = cov_y
            .cholesky()
            .ok_or_else(|| HctlError::Numerical("singular observed-block covariance".into()))?;
        let gain_t = chol.solve(&s_cm.transpose());
        let mean = gain_t.transpose() * DVector::from_column_slice(values);
        let mut cov = &s_cc - &s_cm * &gain_t;
        symmetrize(&mut cov);
        Ok(GaussianConditional { sites: free, mean, cov })
    }
}

/// A Gaussian law on a subset of sites.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub sites: Vec<usize>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianConditional {
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        let d = self.mean.len();
        if d == 0 {
            return Ok(Vec::new());
        }
        let l = cholesky_lower(&self.cov, "conditional covariance")?;
        let mut out = Vec::with_capacity(n * d);
        let mut eps = vec![0.0; d];
        for _ in 0..n {
            fill_normal(rng, &mut eps);
            let x = &self.mean + &l * DVector::from_column_slice(&eps);
            out.extend_from_slice(x.as_slice());
        }
        Ok(out)
    }
}
