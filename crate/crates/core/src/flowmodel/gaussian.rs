use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::RngCore;

use super::{check_inputs, Backend, VelocityModel};
use crate::densities::GmrfSpec;
use crate::error::{HctlError, Result};
use crate::linalg::symmetrize;
use crate::rng::fill_normal;
use crate::schedule::{Shape, StateBatch};

/// Exact denoiser of the prior `N(0, Σ)` under `z_σ = (1 − σ) z0 + σ ε`:
/// `E[z0 | z_σ] = K(σ) z_σ` with `K(σ) = (1 − σ) Σ ((1 − σ)² Σ + σ² I)⁻¹`.
pub struct GaussianModel {
    shape: Shape,
    covariance: DMatrix<f64>,
    cache: Mutex<HashMap<u64, Arc<Denoiser>>>,
}

struct Denoiser {
    gain: DMatrix<f64>,
    /// Square root of the denoising posterior covariance `Σ − (1 − σ) K Σ`.
    post_sqrt: DMatrix<f64>,
}

impl GaussianModel {
    pub fn new(spec: &GmrfSpec) -> Self {
        Self::from_covariance(spec.shape(), spec.covariance().clone())
    }

    pub fn from_covariance(shape: Shape, covariance: DMatrix<f64>) -> Self {
        assert_eq!(covariance.nrows(), shape.len(), "covariance does not match shape");
        Self { shape, covariance, cache: Mutex::new(HashMap::new()) }
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// The denoising matrix `K(σ)`.
    pub fn gain(&self, sigma: f64) -> Result<DMatrix<f64>> {
        Ok(self.denoiser(sigma)?.gain.clone())
    }

    pub fn posterior_covariance(&self, sigma: f64) -> Result<DMatrix<f64>> {
        let d = self.denoiser(sigma)?;
        Ok(&d.post_sqrt * d.post_sqrt.transpose())
    }

    fn denoiser(&self, sigma: f64) -> Result<Arc<Denoiser>> {
        let key = sigma.to_bits();
        if let Some(d) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(d.clone());
        }
        let n = self.covariance.nrows();
        let a = 1.0 - sigma;
        let mut gain = if sigma == 0.0 {
            DMatrix::identity(n, n)
        } else {
            let sys = &self.covariance * (a * a) + DMatrix::identity(n, n) * (sigma * sigma);
            let chol = sys
                .cholesky()
                .ok_or_else(|| HctlError::Numerical(format!("denoiser system singular at sigma {sigma}")))?;
            chol.solve(&self.covariance) * a
        };
        symmetrize(&mut gain);
        let mut post = &self.covariance - &gain * &self.covariance * a;
        symmetrize(&mut post);
        let eig = post.symmetric_eigen();
        let root = DVector::from_iterator(n, eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()));
        let post_sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&root);
        let d = Arc::new(Denoiser { gain, post_sqrt });
        self.cache.lock().expect("cache poisoned").insert(key, d.clone());
        Ok(d)
    }

    fn apply(&self, m: &DMatrix<f64>, z: &StateBatch) -> StateBatch {
        let x = DMatrix::from_column_slice(z.dim(), z.rows(), z.data());
        let y = m * x;
        StateBatch::new(z.shape(), z.rows(), y.as_slice().to_vec()).expect("shape preserved")
    }
}

impl VelocityModel for GaussianModel {
    fn backend(&self) -> Backend {
        Backend::Gaussian
    }

    fn shape(&self) -> Shape {
        self.shape
    }

    fn velocity(&self, z: &StateBatch, sigma: f64) -> Result<StateBatch> {
        check_inputs(self.shape, z, sigma)?;
        if sigma == 0.0 {
            return Ok(StateBatch::zeros(z.shape(), z.rows()));
        }
        let kz = self.apply(&self.denoiser(sigma)?.gain, z);
        let mut u = z.clone();
        for (o, k) in u.data_mut().iter_mut().zip(kz.data()) {
            *o = (*o - k) / sigma;
        }
        Ok(u)
    }

    fn clean_prediction(&self, z: &StateBatch, sigma: f64) -> Result<StateBatch> {
        check_inputs(self.shape, z, sigma)?;
        if sigma == 0.0 {
            return Ok(z.clone());
        }
        Ok(self.apply(&self.denoiser(sigma)?.gain, z))
    }

    fn has_input_gradient(&self) -> bool {
        true
    }

    fn input_vjp(&self, z: &StateBatch, sigma: f64, cotangent: &StateBatch) -> Result<StateBatch> {
        check_inputs(self.shape, z, sigma)?;
        z.check_like(cotangent)?;
        // K is symmetric, so Kᵀ v = K v.
        Ok(self.apply(&self.denoiser(sigma)?.gain, cotangent))
    }

    fn has_posterior_sampler(&self) -> bool {
        true
    }

    fn posterior_sample(&self, z: &StateBatch, sigma: f64, rng: &mut dyn RngCore) -> Result<StateBatch> {
        check_inputs(self.shape, z, sigma)?;
        let d = self.denoiser(sigma)?;
        let mut out = self.apply(&d.gain, z);
        let mut eps = StateBatch::zeros(z.shape(), z.rows());
        fill_normal(rng, eps.data_mut());
        let noise = self.apply(&d.post_sqrt, &eps);
        for (o, e) in out.data_mut().iter_mut().zip(noise.data()) {
            *o += e;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::GmrfParams;
    use crate::rng::{stream, Stream};

    fn scalar_model() -> GaussianModel {
        GaussianModel::from_covariance(Shape::flat(1), DMatrix::identity(1, 1))
    }

    fn batch(vals: &[f64]) -> StateBatch {
        StateBatch::new(Shape::flat(1), vals.len(), vals.to_vec()).unwrap()
    }

    #[test]
    fn scalar_closed_forms() {
        let m = scalar_model();
        let z = batch(&[1.7, -0.3]);
        let u = m.velocity(&z, 0.5).unwrap();
        assert!(u.data().iter().all(|v| v.abs() < 1e-15));
        let k = 0.1 / 0.82;
        let zhat = m.clean_prediction(&z, 0.9).unwrap();
        assert!((zhat.data()[0] - k * 1.7).abs() < 1e-14);
        assert!((k - 0.12195).abs() < 1e-5);
        let u1 = m.velocity(&z, 1.0).unwrap();
        assert_eq!(u1.data(), z.data());
        assert_eq!(m.velocity(&z, 0.0).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(m.clean_prediction(&z, 0.0).unwrap(), z);
    }

    #[test]
    fn invalid_inputs() {
        let m = scalar_model();
        assert!(m.velocity(&batch(&[f64::NAN]), 0.5).is_err());
        assert!(m.velocity(&batch(&[1.0]), 1.5).is_err());
    }

    #[test]
    fn linear_in_state() {
        let g = GmrfSpec::build(GmrfParams { shape: (1, 2, 3), beta1: 0.2, beta2: 0.05, tau_d: 1.2 }).unwrap();
        let m = GaussianModel::new(&g);
        let shape = g.shape();
        let mut rng = stream(1, Stream::Data, 0);
        let mut x = StateBatch::zeros(shape, 1);
        let mut y = StateBatch::zeros(shape, 1);
        fill_normal(&mut rng, x.data_mut());
        fill_normal(&mut rng, y.data_mut());
        let (a, b) = (0.7, -1.9);
        let mut comb = x.clone();
        for (c, yv) in comb.data_mut().iter_mut().zip(y.data()) {
            *c = a * *c + b * yv;
        }
        for sigma in [0.2, 0.6, 0.95] {
            for f in [0, 1] {
                let eval = |s: &StateBatch| if f == 0 { m.velocity(s, sigma).unwrap() } else { m.clean_prediction(s, sigma).unwrap() };
                let (fx, fy, fc) = (eval(&x), eval(&y), eval(&comb));
                for i in 0..shape.len() {
                    let want = a * fx.data()[i] + b * fy.data()[i];
                    assert!((fc.data()[i] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn vjp_is_gain_transpose() {
        let g = GmrfSpec::build(GmrfParams { shape: (1, 1, 4), beta1: 0.3, beta2: 0.0, tau_d: 1.0 }).unwrap();
        let m = GaussianModel::new(&g);
        let k = m.gain(0.4).unwrap();
        let z = StateBatch::zeros(g.shape(), 1);
        let v = StateBatch::new(g.shape(), 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let got = m.input_vjp(&z, 0.4, &v).unwrap();
        let want = k.transpose() * DVector::from_column_slice(v.data());
        for i in 0..4 {
            assert!((got.data()[i] - want[i]).abs() < 1e-14);
        }
        let zero = m.input_vjp(&z, 0.4, &StateBatch::zeros(g.shape(), 1)).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
    }
}
