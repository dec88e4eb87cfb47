use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hctl_core::densities::{GmrfParams, GmrfSpec, ObsModel};
use hctl_core::flowmodel::TrainConfig;
use hctl_core::guidance::{GuidanceSpec, HControlConfig, JacobianMode, Observation, OuterMode, TfgConfig, Variant};
use hctl_core::locality::Axis;
use hctl_core::rng::{stream, Stream};
use hctl_core::schedule::{NoiseSchedule, ScheduleKind, Shape, SiteMask, StateTensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Bumped whenever the layout of `results.json` or a CSV changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Train,
    ToyFig,
    Sweep,
    GibbsOracle,
    Locality,
    Ablate,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::Train, Task::ToyFig, Task::Sweep, Task::GibbsOracle, Task::Locality, Task::Ablate];

    pub fn name(self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::ToyFig => "toy-fig",
            Task::Sweep => "sweep",
            Task::GibbsOracle => "gibbs-oracle",
            Task::Locality => "locality",
            Task::Ablate => "ablate",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`; expected one of train, toy-fig, sweep, gibbs-oracle, locality, ablate"))
    }
}

/// Which sites of a lattice are observed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    None,
    All,
    /// The lower half of the lattice along `axis`.
    Half { axis: Axis },
    /// Each site observed independently with probability `fraction`.
    Random { fraction: f64 },
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec::Half { axis: Axis::W }
    }
}

impl MaskSpec {
    pub fn build(&self, lattice: (usize, usize, usize), master: u64) -> Result<SiteMask> {
        let (l, h, w) = lattice;
        Ok(match *self {
            MaskSpec::None => SiteMask::filled(lattice, false),
            MaskSpec::All => SiteMask::filled(lattice, true),
            MaskSpec::Half { axis } => SiteMask::from_fn(lattice, |a, b, c| match axis {
                Axis::L => a < l / 2,
                Axis::H => b < h / 2,
                Axis::W => c < w / 2,
            }),
            MaskSpec::Random { fraction } => {
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(HarnessError::Config(format!("mask fraction {fraction} outside [0, 1]")));
                }
                let mut rng = stream(master, Stream::Observation, u32::MAX);
                SiteMask::from_fn(lattice, |_, _, _| rng.gen::<f64>() < fraction)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    Checkerboard {
        #[serde(default)]
        obs: ObsModel,
    },
    Gmrf {
        #[serde(default)]
        params: GmrfParams,
        #[serde(default)]
        mask: MaskSpec,
        /// Observation noise for soft-pull style guidance; `None` pins exactly.
        #[serde(default)]
        tau: Option<f64>,
    },
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig::Checkerboard { obs: ObsModel::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Mlp { weights: PathBuf },
    Gaussian,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Mlp { weights: PathBuf::from("weights.bin") }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    #[serde(default = "default_seed_count")]
    pub count: u32,
    #[serde(default)]
    pub master: u64,
}

fn default_seed_count() -> u32 {
    10
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { count: default_seed_count(), master: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "SweepConfig::default_j")]
    pub j_values: Vec<usize>,
    #[serde(default = "SweepConfig::default_n_recur")]
    pub n_recur_values: Vec<usize>,
    /// Base h-control settings; `j_max` is replaced per cell.
    #[serde(default)]
    pub h_control: Option<HControlConfig>,
    /// Base TFG-UGD settings; `n_recur` is replaced per cell.
    #[serde(default)]
    pub tfg: TfgConfig,
    /// Noise bands for the per-iteration `|Δ_W|` summary.
    #[serde(default = "SweepConfig::default_bands")]
    pub band_edges: Vec<f64>,
}

impl SweepConfig {
    fn default_j() -> Vec<usize> {
        vec![0, 1, 2, 4, 8, 16]
    }
    fn default_n_recur() -> Vec<usize> {
        (1..=6).collect()
    }
    fn default_bands() -> Vec<f64> {
        hctl_core::metrics::DEFAULT_BAND_EDGES.to_vec()
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            j_values: Self::default_j(),
            n_recur_values: Self::default_n_recur(),
            h_control: None,
            tfg: TfgConfig::default(),
            band_edges: Self::default_bands(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "OracleConfig::default_sigma")]
    pub sigma: f64,
    #[serde(default = "OracleConfig::default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "OracleConfig::default_retained")]
    pub retained: usize,
    /// Chain iterates and oracle draws fed to the energy test, each.
    #[serde(default = "OracleConfig::default_energy_points")]
    pub energy_points: usize,
    #[serde(default = "OracleConfig::default_permutations")]
    pub permutations: usize,
    #[serde(default = "OracleConfig::default_batches")]
    pub batches: usize,
    /// Also check the empty-mask chain against the unconditional prior.
    #[serde(default = "OracleConfig::default_true")]
    pub empty_mask_check: bool,
}

impl OracleConfig {
    fn default_sigma() -> f64 {
        0.5
    }
    fn default_burn_in() -> usize {
        500
    }
    fn default_retained() -> usize {
        20_000
    }
    fn default_energy_points() -> usize {
        1_500
    }
    fn default_permutations() -> usize {
        200
    }
    fn default_batches() -> usize {
        50
    }
    fn default_true() -> bool {
        true
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            sigma: Self::default_sigma(),
            burn_in: Self::default_burn_in(),
            retained: Self::default_retained(),
            energy_points: Self::default_energy_points(),
            permutations: Self::default_permutations(),
            batches: Self::default_batches(),
            empty_mask_check: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalityConfig {
    /// Independent lattice samples per source.
    #[serde(default = "LocalityConfig::default_samples")]
    pub samples: usize,
    /// Noise levels at which clean predictions are analysed.
    #[serde(default = "LocalityConfig::default_sigmas")]
    pub sigmas: Vec<f64>,
}

impl LocalityConfig {
    fn default_samples() -> usize {
        1_000
    }
    fn default_sigmas() -> Vec<f64> {
        vec![0.1, 0.3, 0.5, 0.7, 0.9]
    }
}

impl Default for LocalityConfig {
    fn default() -> Self {
        Self { samples: Self::default_samples(), sigmas: Self::default_sigmas() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    /// Base h-control settings; `readout` and `freeze` are toggled per cell.
    #[serde(default)]
    pub h_control: Option<HControlConfig>,
    /// Chains for the Polyak variance ratio.
    #[serde(default = "AblateConfig::default_repeats")]
    pub repeats: usize,
    /// Noise level of the Polyak variance ratio probe.
    #[serde(default = "AblateConfig::default_sigma")]
    pub sigma: f64,
}

impl AblateConfig {
    fn default_repeats() -> usize {
        200
    }
    fn default_sigma() -> f64 {
        0.5
    }
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { h_control: None, repeats: Self::default_repeats(), sigma: Self::default_sigma() }
    }
}

/// One experiment. Every field has a default; [`ExperimentConfig::resolve`]
/// fills task-dependent ones so the echo in `results.json` is complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub task: Option<Task>,
    #[serde(default)]
    pub density: DensityConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub methods: Vec<GuidanceSpec>,
    #[serde(default)]
    pub seeds: SeedConfig,
    #[serde(default = "default_samples_per_seed")]
    pub samples_per_seed: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub schedule: ScheduleKind,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    /// Unconditional samples drawn after training for the manifold-hit check.
    #[serde(default = "default_train_eval_samples")]
    pub train_eval_samples: usize,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub locality: LocalityConfig,
    #[serde(default)]
    pub ablate: AblateConfig,
}

fn default_samples_per_seed() -> usize {
    500
}
fn default_steps() -> usize {
    50
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_train_eval_samples() -> usize {
    5_000
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config: {e}")))
    }

    /// Binds the config to `task`, applies overrides, materializes every
    /// task-dependent default and validates.
    pub fn resolve(mut self, task: Task, overrides: &Overrides) -> Result<Self> {
        match self.task {
            Some(t) if t != task => {
                return Err(HarnessError::Config(format!("config is for task `{t}` but `{task}` was requested")));
            }
            _ => self.task = Some(task),
        }
        if let Some(dir) = &overrides.out_dir {
            self.out_dir = dir.clone();
        }
        if let Some(seed) = overrides.seed {
            self.seeds.master = seed;
            self.train.seed = seed;
        }
        let soft_ok = self.observation_tau().is_some();
        let default_hc = HControlConfig {
            outer_mode: if soft_ok { OuterMode::Soft } else { OuterMode::Hard },
            freeze: false,
            ..Default::default()
        };
        if task == Task::ToyFig && self.methods.is_empty() {
            self.methods = vec![
                GuidanceSpec::new(Variant::Dps { zeta: None, jacobian_mode: JacobianMode::FullVjp }),
                GuidanceSpec::new(Variant::TfgUgd(TfgConfig::default())),
                GuidanceSpec::new(Variant::HControl(HControlConfig { j_max: 4, ..default_hc })),
            ];
        }
        self.sweep.h_control.get_or_insert(default_hc);
        self.ablate.h_control.get_or_insert(HControlConfig { j_max: 8, freeze: true, ..default_hc });
        self.validate(task)?;
        Ok(self)
    }

    fn observation_tau(&self) -> Option<f64> {
        match &self.density {
            DensityConfig::Checkerboard { obs } => Some(obs.sigma_y),
            DensityConfig::Gmrf { tau, .. } => *tau,
        }
    }

    fn validate(&self, task: Task) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.count == 0 {
            return bad("seeds.count must be at least 1".into());
        }
        if self.samples_per_seed == 0 || self.steps == 0 {
            return bad("samples_per_seed and steps must be positive".into());
        }
        self.train.validate()?;
        match &self.density {
            DensityConfig::Checkerboard { obs } => obs.validate()?,
            DensityConfig::Gmrf { tau, .. } => {
                if let Some(t) = tau {
                    if !(*t > 0.0) {
                        return bad("gmrf tau must be positive".into());
                    }
                }
            }
        }
        let needs_weights = matches!(task, Task::ToyFig | Task::Sweep | Task::Ablate);
        match (&self.model, &self.density) {
            (ModelConfig::Mlp { weights }, DensityConfig::Checkerboard { .. }) => {
                if needs_weights && !weights.is_file() {
                    return bad(format!("weights file {} does not exist", weights.display()));
                }
            }
            (ModelConfig::Gaussian, DensityConfig::Gmrf { .. }) => {}
            (ModelConfig::Mlp { .. }, DensityConfig::Gmrf { .. }) if !needs_weights => {}
            (m, d) => return bad(format!("model {m:?} cannot serve density {d:?}")),
        }
        let requires = |ok: bool, what: &str| if ok { Ok(()) } else { bad(format!("task `{task}` needs {what}")) };
        let checker = matches!(self.density, DensityConfig::Checkerboard { .. });
        match task {
            Task::Train => requires(checker, "the checkerboard density")?,
            Task::ToyFig | Task::Sweep => requires(checker && matches!(self.model, ModelConfig::Mlp { .. }), "the checkerboard density with an mlp model")?,
            Task::GibbsOracle => requires(matches!(self.model, ModelConfig::Gaussian), "the gaussian backend")?,
            Task::Locality => requires(!checker, "a gmrf density")?,
            Task::Ablate => {}
        }
        for m in &self.methods {
            m.validate(self.steps)?;
            if needs_soft(m) && self.observation_tau().is_none() {
                return bad(format!("method {} needs a finite observation noise", m.name()));
            }
        }
        let hc = [self.sweep.h_control, self.ablate.h_control];
        for c in hc.into_iter().flatten() {
            c.validate()?;
            if c.outer_mode == OuterMode::Soft && self.observation_tau().is_none() {
                return bad("soft outer mode needs a finite observation noise".into());
            }
        }
        if self.sweep.n_recur_values.contains(&0) {
            return bad("sweep n_recur values must be at least 1".into());
        }
        let o = &self.oracle;
        if !(o.sigma > 0.0 && o.sigma < 1.0) || o.retained < 2 || o.energy_points < 2 || o.permutations == 0 || o.batches < 2 {
            return bad("oracle needs sigma in (0, 1), retained >= 2, energy_points >= 2, permutations >= 1, batches >= 2".into());
        }
        if o.energy_points > o.retained {
            return bad("oracle energy_points cannot exceed retained".into());
        }
        if self.locality.samples == 0 || self.locality.sigmas.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
            return bad("locality needs samples >= 1 and sigmas in (0, 1)".into());
        }
        if self.ablate.repeats < 2 || !(self.ablate.sigma > 0.0 && self.ablate.sigma <= 1.0) {
            return bad("ablate needs repeats >= 2 and sigma in (0, 1]".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::build(self.steps, self.schedule)?)
    }
}

fn needs_soft(m: &GuidanceSpec) -> bool {
    match m.variant {
        Variant::SoftPull { .. } | Variant::Dps { zeta: None, .. } | Variant::TfgUgd(_) => true,
        Variant::HControl(c) => c.outer_mode == OuterMode::Soft,
        _ => false,
    }
}

/// The fixed evidence of a run.
pub struct Evidence {
    pub observation: Observation,
    /// Checkerboard observation model, when the density is the toy.
    pub toy: Option<ObsModel>,
    pub gmrf: Option<GmrfSpec>,
}

impl Evidence {
    /// Toy evidence pins the observed coordinate at `y_obs`; GMRF evidence is a
    /// single prior draw, fixed by the master seed.
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.density {
            DensityConfig::Checkerboard { obs } => {
                let mut bits = vec![false; 2];
                bits[obs.coord] = true;
                let mut values = vec![0.0; 2];
                values[obs.coord] = obs.y_obs;
                let observation = Observation::new(
                    SiteMask::new((1, 1, 2), bits)?,
                    StateTensor::new(Shape::flat(2), values)?,
                    Some(obs.sigma_y),
                )?;
                Ok(Self { observation, toy: Some(*obs), gmrf: None })
            }
            DensityConfig::Gmrf { params, mask, tau } => {
                let spec = GmrfSpec::build(*params)?;
                let mask = mask.build(params.shape, cfg.seeds.master)?;
                let truth = spec.sample(1, &mut stream(cfg.seeds.master, Stream::Observation, 0)).remove(0);
                let observation = Observation::new(mask, truth, *tau)?;
                Ok(Self { observation, toy: None, gmrf: Some(spec) })
            }
        }
    }
}
