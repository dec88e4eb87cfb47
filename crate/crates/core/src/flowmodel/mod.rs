//! Velocity fields `u(z, σ)` and the clean prediction `ẑ0 = z − σ u`.
//!
//! Two backends: a trainable MLP for the 2D checkerboard and the analytic
//! Bayes-optimal denoiser of a Gaussian prior.

mod gaussian;
mod mlp;
mod train;
mod weights;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HctlError, Result};
use crate::schedule::{Shape, StateBatch};

pub use gaussian::GaussianModel;
pub use mlp::{sinusoidal_embedding, Mlp, MlpConfig};
pub use train::{cosine_lr, loss_and_grad, train_mlp, LossPoint, TrainConfig, TrainOutcome};
pub use weights::{read_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Mlp,
    Gaussian,
}

pub trait VelocityModel: Send + Sync {
    fn backend(&self) -> Backend;

    fn shape(&self) -> Shape;

    /// Velocity for every row of `z` at a shared noise level.
    fn velocity(&self, z: &StateBatch, sigma: f64) -> Result<StateBatch>;

    fn clean_prediction(&self, z: &StateBatch, sigma: f64) -> Result<StateBatch> {
        let u = self.velocity(z, sigma)?;
        let mut out = z.clone();
        for (o, v) in out.data_mut().iter_mut().zip(u.data()) {
            *o -= sigma * v;
        }
        Ok(out)
    }

    fn has_input_gradient(&self) -> bool {
        false
    }

    /// `vᵀ ∂ẑ0/∂z` for each row.
    fn input_vjp(&self, _z: &StateBatch, _sigma: f64, _cotangent: &StateBatch) -> Result<StateBatch> {
        Err(HctlError::Unsupported(format!("{:?} backend has no input gradient", self.backend())))
    }

    fn has_posterior_sampler(&self) -> bool {
        false
    }

    /// One exact draw from the denoising posterior `p(z0 | z_σ = z)` per row.
    fn posterior_sample(&self, _z: &StateBatch, _sigma: f64, _rng: &mut dyn RngCore) -> Result<StateBatch> {
        Err(HctlError::Unsupported(format!(
            "{:?} backend cannot sample its denoising posterior",
            self.backend()
        )))
    }
}

pub(crate) fn check_inputs(shape: Shape, z: &StateBatch, sigma: f64) -> Result<()> {
    if z.shape() != shape {
        return Err(invalid(format!("model expects shape {:?}, got {:?}", shape, z.shape())));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(invalid(format!("noise level {sigma} outside [0, 1]")));
    }
    if !z.all_finite() {
        return Err(invalid("non-finite model input"));
    }
    Ok(())
}
