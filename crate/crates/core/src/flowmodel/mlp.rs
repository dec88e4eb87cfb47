use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_inputs, Backend, VelocityModel};
use crate::error::{invalid, Result};
use crate::schedule::{Shape, StateBatch};

/// Number of affine layers; SiLU sits between consecutive layers.
pub const DEPTH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    #[serde(default = "MlpConfig::default_state_dim")]
    pub state_dim: usize,
    #[serde(default = "MlpConfig::default_hidden")]
    pub hidden: usize,
    #[serde(default = "MlpConfig::default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "MlpConfig::default_freq_min")]
    pub freq_min: f64,
    #[serde(default = "MlpConfig::default_freq_max")]
    pub freq_max: f64,
}

impl MlpConfig {
    fn default_state_dim() -> usize {
        2
    }
    fn default_hidden() -> usize {
        128
    }
    fn default_embed_dim() -> usize {
        64
    }
    fn default_freq_min() -> f64 {
        1.0
    }
    fn default_freq_max() -> f64 {
        1000.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.hidden == 0 {
            return Err(invalid("MLP dimensions must be positive"));
        }
        if self.embed_dim < 4 || !self.embed_dim.is_multiple_of(2) {
            return Err(invalid("time embedding dimension must be even and at least 4"));
        }
        if !(self.freq_min > 0.0 && self.freq_max >= self.freq_min) {
            return Err(invalid("embedding frequencies must satisfy 0 < min <= max"));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> [usize; DEPTH + 1] {
        let mut dims = [self.hidden; DEPTH + 1];
        dims[0] = self.state_dim + self.embed_dim;
        dims[DEPTH] = self.state_dim;
        dims
    }
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self { state_dim: 2, hidden: 128, embed_dim: 64, freq_min: 1.0, freq_max: 1000.0 }
    }
}

/// `[sin(f_i σ)…, cos(f_i σ)…]` with geometrically spaced frequencies.
pub fn sinusoidal_embedding(sigma: f64, dim: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let t = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
        let f = fmin * (fmax / fmin).powf(t);
        out[i] = (f * sigma).sin();
        out[half + i] = (f * sigma).cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Affine {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Six-layer velocity MLP on `state ⊕ embed(σ)`. Columns of every activation
/// matrix are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    cfg: MlpConfig,
    pub(crate) layers: Vec<Affine>,
}

pub(crate) struct Tape {
    /// Input to each affine layer (`acts[0]` is the network input).
    acts: Vec<DMatrix<f64>>,
    /// SiLU derivative at each hidden pre-activation.
    dact: Vec<DMatrix<f64>>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}


impl Mlp {
    /// Uniform `±1/√fan_in` initialization of weights and biases.
    pub fn init<R: Rng + ?Sized>(cfg: MlpConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.layer_dims();
        let layers = (0..DEPTH)
            .map(|l| {
                let bound = 1.0 / (dims[l] as f64).sqrt();
                let w = DMatrix::from_fn(dims[l + 1], dims[l], |_, _| rng.gen_range(-bound..bound));
                let b = DVector::from_fn(dims[l + 1], |_, _| rng.gen_range(-bound..bound));
                Affine { w, b }
            })
            .collect();
        Ok(Self { cfg, layers })
    }

    pub(crate) fn from_layers(cfg: MlpConfig, layers: Vec<Affine>) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.layer_dims();
        if layers.len() != DEPTH {
            return Err(invalid(format!("expected {DEPTH} layers, got {}", layers.len())));
        }
        for (l, a) in layers.iter().enumerate() {
            if a.w.shape() != (dims[l + 1], dims[l]) || a.b.len() != dims[l + 1] {
                return Err(invalid(format!("layer {l} has the wrong shape")));
            }
            if a.w.iter().chain(a.b.iter()).any(|x| !x.is_finite()) {
                return Err(invalid(format!("layer {l} has non-finite weights")));
            }
        }
        Ok(Self { cfg, layers })
    }

    pub fn config(&self) -> MlpConfig {
        self.cfg
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|a| a.w.len() + a.b.len()).sum()
    }

    /// All parameters, layer by layer (weights row-major, then bias).
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for a in &self.layers {
            for i in 0..a.w.nrows() {
                out.extend(a.w.row(i).iter());
            }
            out.extend(a.b.iter());
        }
        out
    }

    pub fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(invalid("parameter vector has the wrong length"));
        }
        let mut it = flat.iter().copied();
        for a in &mut self.layers {
            for i in 0..a.w.nrows() {
                for j in 0..a.w.ncols() {
                    a.w[(i, j)] = it.next().expect("length checked");
                }
            }
            for b in a.b.iter_mut() {
                *b = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    /// Network input: states in the first rows, per-column time embedding below.
    pub(crate) fn build_input(&self, states: &[f64], sigmas: &[f64]) -> DMatrix<f64> {
        let d = self.cfg.state_dim;
        let e = self.cfg.embed_dim;
        let n = sigmas.len();
        let mut x = DMatrix::zeros(d + e, n);
        let mut cached: Option<(u64, Vec<f64>)> = None;
        for (col, &s) in sigmas.iter().enumerate() {
            let emb = match &cached {
                Some((bits, v)) if *bits == s.to_bits() => v.clone(),
                _ => {
                    let v = sinusoidal_embedding(s, e, self.cfg.freq_min, self.cfg.freq_max);
                    cached = Some((s.to_bits(), v.clone()));
                    v
                }
            };
            let mut column = x.column_mut(col);
            for i in 0..d {
                column[i] = states[col * d + i];
            }
            for i in 0..e {
                column[d + i] = emb[i];
            }
        }
        x
    }

    pub(crate) fn forward(&self, input: DMatrix<f64>, keep_tape: bool) -> (DMatrix<f64>, Option<Tape>) {
        let mut acts = Vec::with_capacity(DEPTH);
        let mut dact = Vec::with_capacity(DEPTH - 1);
        let mut a = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.w * &a;
            let rows = z.nrows();
            for col in z.as_mut_slice().chunks_exact_mut(rows) {
                for (v, b) in col.iter_mut().zip(layer.b.iter()) {
                    *v += b;
                }
            }
            if keep_tape {
                acts.push(a);
            }
            if l + 1 == DEPTH {
                let tape = keep_tape.then_some(Tape { acts, dact });
                return (z, tape);
            }
            if keep_tape {
                let mut d = z.clone();
                for (x, dx) in z.as_mut_slice().iter_mut().zip(d.as_mut_slice()) {
                    let s = sigmoid(*x);
                    *dx = s * (1.0 + *x * (1.0 - s));
                    *x *= s;
                }
                dact.push(d);
            } else {
                z.apply(|x| *x = silu(*x));
            }
            a = z;
        }
        unreachable!("network has at least one layer")
    }

    /// Reverse pass. Returns the gradient w.r.t. the network input and, when
    /// requested, per-layer parameter gradients.
    pub(crate) fn backward(
        &self,
        tape: &Tape,
        grad_out: DMatrix<f64>,
        want_params: bool,
    ) -> (DMatrix<f64>, Option<Vec<Affine>>) {
        let mut grads = want_params.then(|| Vec::with_capacity(DEPTH));
        let mut g = grad_out;
        for l in (0..DEPTH).rev() {
            let layer = &self.layers[l];
            if let Some(gs) = grads.as_mut() {
                let gw = &g * tape.acts[l].transpose();
                let gb = g.column_sum();
                gs.push(Affine { w: gw, b: gb });
            }
            let mut ga = layer.w.transpose() * &g;
            if l > 0 {
                ga.component_mul_assign(&tape.dact[l - 1]);
            }
            g = ga;
        }
        if let Some(gs) = grads.as_mut() {
            gs.reverse();
        }
        (g, grads)
    }

    fn check(&self, z: &StateBatch, sigma: f64) -> Result<()> {
        if z.dim() != self.cfg.state_dim {
            return Err(invalid(format!("MLP expects {} coordinates, got {}", self.cfg.state_dim, z.dim())));
        }
        check_inputs(z.shape(), z, sigma)
    }
}

impl VelocityModel for Mlp {
    fn backend(&self) -> Backend {
        Backend::Mlp
    }

    fn shape(&self) -> Shape {
        Shape::flat(self.cfg.state_dim)
    }

    fn velocity(&self, z: &StateBatch, sigma: f64) -> Result<StateBatch> {
        self.check(z, sigma)?;
        let sigmas = vec![sigma; z.rows()];
        let (out, _) = self.forward(self.build_input(z.data(), &sigmas), false);
        StateBatch::new(z.shape(), z.rows(), out.as_slice().to_vec())
    }

    fn has_input_gradient(&self) -> bool {
        true
    }

    fn input_vjp(&self, z: &StateBatch, sigma: f64, cotangent: &StateBatch) -> Result<StateBatch> {
        self.check(z, sigma)?;
        z.check_like(cotangent)?;
        let d = self.cfg.state_dim;
        let sigmas = vec![sigma; z.rows()];
        let (_, tape) = self.forward(self.build_input(z.data(), &sigmas), true);
        let v = DMatrix::from_column_slice(d, z.rows(), cotangent.data());
        let (g_in, _) = self.backward(&tape.expect("tape kept"), v * (-sigma), false);
        // ẑ0 = z − σ u, so vᵀ ∂ẑ0/∂z = v − σ (∂u/∂z)ᵀ v.
        let mut out = cotangent.clone();
        for c in 0..z.rows() {
            for i in 0..d {
                out.row_mut(c)[i] += g_in[(i, c)];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normal, stream, Stream};

    fn small() -> Mlp {
        let cfg = MlpConfig { hidden: 12, embed_dim: 8, ..Default::default() };
        Mlp::init(cfg, &mut stream(2, Stream::Training, 0)).unwrap()
    }

    #[test]
    fn embedding_depends_only_on_sigma() {
        let a = sinusoidal_embedding(0.3, 64, 1.0, 1000.0);
        let b = sinusoidal_embedding(0.3, 64, 1.0, 1000.0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!((a[0] - 0.3f64.sin()).abs() < 1e-15);
        assert!((a[31] - 300.0f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn evaluation_is_pure() {
        let m = small();
        let mut z = StateBatch::zeros(Shape::flat(2), 5);
        fill_normal(&mut stream(4, Stream::Data, 0), z.data_mut());
        let a = m.velocity(&z, 0.37).unwrap();
        let b = m.velocity(&z, 0.37).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(m.clean_prediction(&z, 0.0).unwrap(), z);
    }

    #[test]
    fn batch_rows_are_independent() {
        let m = small();
        let mut z = StateBatch::zeros(Shape::flat(2), 3);
        fill_normal(&mut stream(5, Stream::Data, 0), z.data_mut());
        let full = m.velocity(&z, 0.6).unwrap();
        let one = m.velocity(&z.select(&[1]), 0.6).unwrap();
        for i in 0..2 {
            assert!((full.row(1)[i] - one.row(0)[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn flat_parameters_round_trip() {
        let mut m = small();
        let p = m.flat_parameters();
        let mut q = p.clone();
        q[3] += 1.0;
        m.set_flat_parameters(&q).unwrap();
        assert_eq!(m.flat_parameters(), q);
        assert!(m.set_flat_parameters(&p[1..]).is_err());
    }

    #[test]
    fn vjp_of_zero_cotangent_is_zero() {
        let m = small();
        let z = StateBatch::new(Shape::flat(2), 1, vec![0.3, -0.2]).unwrap();
        let v = StateBatch::zeros(Shape::flat(2), 1);
        let g = m.input_vjp(&z, 0.5, &v).unwrap();
        assert!(g.data().iter().all(|&x| x == 0.0));
    }
}
