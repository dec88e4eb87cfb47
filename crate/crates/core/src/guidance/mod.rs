//! Guided flow-matching samplers: the Euler integrator, the baselines (hard
//! replacement, soft pull, DPS, weighted h-transform, TFG-UGD) and h-control
//! with its inner pseudo-Gibbs refinement.

mod inner;
mod sampler;
mod steps;
mod welford;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::schedule::{PatchSizes, SiteMask, StateTensor};

pub use inner::{inner_gibbs, InnerHooks, InnerOutcome, InnerStep};
pub use sampler::{sample, SampleOutput, StepDiagnostics};
pub use steps::{
    dps_correction, euler_step, euler_step_batch, outer_hard_replace, outer_soft_pull, tfg_ugd_step,
    weighted_h_step,
};
pub use welford::{DeltaGate, PatchWelford};

/// Partial evidence: observed sites, their values, and the observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub mask: SiteMask,
    /// Only entries on observed sites are read.
    pub values: StateTensor,
    /// `None` is the hard limit τ → 0.
    pub tau: Option<f64>,
}

impl Observation {
    pub fn new(mask: SiteMask, values: StateTensor, tau: Option<f64>) -> Result<Self> {
        mask.check_shape(values.shape())?;
        if let Some(t) = tau {
            if !(t > 0.0) || !t.is_finite() {
                return Err(invalid(format!("observation noise tau must be positive, got {t}")));
            }
        }
        let s = values.shape().sites();
        for c in 0..values.shape().c {
            for site in mask.observed_sites() {
                if !values.data()[c * s + site].is_finite() {
                    return Err(invalid("observed values must be finite"));
                }
            }
        }
        Ok(Self { mask, values, tau })
    }

    pub(crate) fn require_tau(&self) -> Result<f64> {
        self.tau.ok_or_else(|| invalid("this guidance needs a finite observation noise tau"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NfeCounter {
    pub forward_calls: u64,
    pub backward_calls: u64,
}

impl NfeCounter {
    pub fn nfe(&self) -> u64 {
        self.forward_calls + self.backward_calls
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    #[default]
    FullVjp,
    StopGrad,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterMode {
    #[default]
    Hard,
    Soft,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerRecon {
    #[default]
    Mean,
    PosteriorSample,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    #[default]
    Polyak,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HControlConfig {
    #[serde(default = "HControlConfig::default_j_max")]
    pub j_max: usize,
    #[serde(default = "HControlConfig::default_kappa")]
    pub kappa: f64,
    #[serde(default = "HControlConfig::default_nu")]
    pub nu: f64,
    /// Apply the patch freeze and early exit. When off, stability is still
    /// tracked for diagnostics.
    #[serde(default = "HControlConfig::default_freeze")]
    pub freeze: bool,
    #[serde(default)]
    pub patch_sizes: PatchSizes,
    #[serde(default)]
    pub outer_mode: OuterMode,
    /// Multiplier on the soft-pull coefficient `σσ̇/τ²`.
    #[serde(default = "HControlConfig::default_pull_scale")]
    pub pull_scale: f64,
    #[serde(default)]
    pub inner_recon: InnerRecon,
    #[serde(default)]
    pub readout: Readout,
}

impl HControlConfig {
    fn default_j_max() -> usize {
        10
    }
    fn default_kappa() -> f64 {
        0.1
    }
    fn default_nu() -> f64 {
        0.9
    }
    fn default_freeze() -> bool {
        true
    }
    fn default_pull_scale() -> f64 {
        1.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa <= 1.0) || !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(invalid("kappa and nu must lie in (0, 1]"));
        }
        if self.patch_sizes.l == 0 || self.patch_sizes.h == 0 || self.patch_sizes.w == 0 {
            return Err(invalid("patch sizes must be positive"));
        }
        if !(self.pull_scale >= 0.0) {
            return Err(invalid("pull_scale must be non-negative"));
        }
        Ok(())
    }
}

impl Default for HControlConfig {
    fn default() -> Self {
        Self {
            j_max: 10,
            kappa: 0.1,
            nu: 0.9,
            freeze: true,
            patch_sizes: PatchSizes::default(),
            outer_mode: OuterMode::Hard,
            pull_scale: 1.0,
            inner_recon: InnerRecon::Mean,
            readout: Readout::Polyak,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TfgConfig {
    #[serde(default = "TfgConfig::default_n_recur")]
    pub n_recur: usize,
    #[serde(default = "TfgConfig::default_n_iter")]
    pub n_iter: usize,
    #[serde(default = "TfgConfig::default_strength")]
    pub mu: f64,
    #[serde(default = "TfgConfig::default_strength")]
    pub rho: f64,
}

impl TfgConfig {
    fn default_n_recur() -> usize {
        2
    }
    fn default_n_iter() -> usize {
        1
    }
    fn default_strength() -> f64 {
        0.5
    }

    /// Model calls per outer step.
    pub fn calls_per_step(&self) -> usize {
        self.n_recur * (self.n_iter + 1) + 1
    }
}

impl Default for TfgConfig {
    fn default() -> Self {
        Self { n_recur: 2, n_iter: 1, mu: 0.5, rho: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Variant {
    None,
    HardReplace,
    SoftPull {
        #[serde(default = "default_one")]
        pull_scale: f64,
    },
    Dps {
        /// Constant step scale; `None` uses `σσ̇/τ²`.
        #[serde(default)]
        zeta: Option<f64>,
        #[serde(default)]
        jacobian_mode: JacobianMode,
    },
    WeightedH {
        #[serde(default = "default_one")]
        alpha: f64,
    },
    TfgUgd(TfgConfig),
    HControl(HControlConfig),
}

fn default_one() -> f64 {
    1.0
}

/// One sampling method: the variant, its parameters and the outer-step window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    #[serde(flatten)]
    pub variant: Variant,
    /// Outer steps `[s, e)` that receive guidance; `None` is every step.
    #[serde(default)]
    pub window: Option<[usize; 2]>,
}

impl GuidanceSpec {
    pub fn new(variant: Variant) -> Self {
        Self { variant, window: None }
    }

    pub fn with_window(mut self, start: usize, end: usize) -> Self {
        self.window = Some([start, end]);
        self
    }

    pub fn resolved_window(&self, steps: usize) -> [usize; 2] {
        self.window.unwrap_or([0, steps])
    }

    pub fn name(&self) -> &'static str {
        match self.variant {
            Variant::None => "none",
            Variant::HardReplace => "hard_replace",
            Variant::SoftPull { .. } => "soft_pull",
            Variant::Dps { .. } => "dps",
            Variant::WeightedH { .. } => "weighted_h",
            Variant::TfgUgd(_) => "tfg_ugd",
            Variant::HControl(_) => "h_control",
        }
    }

    pub fn validate(&self, steps: usize) -> Result<()> {
        let [s, e] = self.resolved_window(steps);
        if s > e || e > steps {
            return Err(invalid(format!("window [{s}, {e}) must satisfy 0 <= s <= e <= {steps}")));
        }
        match self.variant {
            Variant::SoftPull { pull_scale } if !(pull_scale >= 0.0) => {
                Err(invalid("pull_scale must be non-negative"))
            }
            Variant::Dps { zeta: Some(z), .. } if !z.is_finite() => Err(invalid("dps zeta must be finite")),
            Variant::WeightedH { alpha } if !(alpha >= 0.0) => Err(invalid("weighted_h alpha must be non-negative")),
            Variant::TfgUgd(c) if c.n_recur == 0 || !c.mu.is_finite() || !c.rho.is_finite() => {
                Err(invalid("tfg_ugd needs n_recur >= 1 and finite strengths"))
            }
            Variant::HControl(c) => c.validate(),
            _ => Ok(()),
        }
    }
}
