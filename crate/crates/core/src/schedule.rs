//! Noise schedules, lattice states, site masks and patch partitions.
//!
//! A state has shape `(C, L, H, W)` and is stored channel-major: coordinate
//! `(c, l, h, w)` lives at `c * S + site` with `site = (l * H + h) * W + w` and
//! `S = L * H * W`. Masks are per site and broadcast across channels.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Sampling-order noise levels `1 = σ_0 > σ_1 > … > σ_K = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let sigmas = match kind {
            ScheduleKind::Linear => (0..=steps)
                .map(|k| {
                    if k == steps {
                        0.0
                    } else {
                        1.0 - k as f64 / steps as f64
                    }
                })
                .collect(),
        };
        Ok(Self { sigmas })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Forward-time slope dσ/dt at step `k`, with t running from the clean end
    /// (t = 0) to the noise end (t = 1). Positive for every decreasing schedule.
    pub fn sigma_dot(&self, k: usize) -> f64 {
        (self.sigmas[k] - self.sigmas[k + 1]) * self.steps() as f64
    }

    /// Index of the schedule level nearest to `sigma`.
    pub fn nearest_step(&self, sigma: f64) -> usize {
        let mut best = 0;
        for (k, s) in self.sigmas.iter().enumerate() {
            if (s - sigma).abs() < (self.sigmas[best] - sigma).abs() {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub l: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, l: usize, h: usize, w: usize) -> Self {
        Self { c, l, h, w }
    }

    /// Flat `D`-dimensional state viewed as one channel on a `1 × 1 × D` lattice.
    pub const fn flat(d: usize) -> Self {
        Self::new(1, 1, 1, d)
    }

    pub fn sites(&self) -> usize {
        self.l * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.c * self.sites()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn site_index(&self, l: usize, h: usize, w: usize) -> usize {
        (l * self.h + h) * self.w + w
    }

    pub fn site_coords(&self, site: usize) -> (usize, usize, usize) {
        let w = site % self.w;
        let h = (site / self.w) % self.h;
        let l = site / (self.w * self.h);
        (l, h, w)
    }

    pub fn lattice(&self) -> (usize, usize, usize) {
        (self.l, self.h, self.w)
    }
}

/// One lattice state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl StateTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(invalid(format!(
                "state data has {} values, shape {:?} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("state contains non-finite values"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.len()] }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, site: usize) -> f64 {
        self.data[c * self.shape.sites() + site]
    }
}

/// A batch of independent chains sharing one shape; each row is one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBatch {
    shape: Shape,
    rows: usize,
    data: Vec<f64>,
}

impl StateBatch {
    pub fn new(shape: Shape, rows: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * shape.len() {
            return Err(invalid(format!(
                "batch data has {} values, expected {} x {}",
                data.len(),
                rows,
                shape.len()
            )));
        }
        Ok(Self { shape, rows, data })
    }

    pub fn zeros(shape: Shape, rows: usize) -> Self {
        Self { shape, rows, data: vec![0.0; rows * shape.len()] }
    }

    pub fn from_tensor(t: &StateTensor) -> Self {
        Self { shape: t.shape, rows: 1, data: t.data.clone() }
    }

    /// Every row a copy of `t`.
    pub fn broadcast(t: &StateTensor, rows: usize) -> Self {
        let mut data = Vec::with_capacity(rows * t.data.len());
        for _ in 0..rows {
            data.extend_from_slice(&t.data);
        }
        Self { shape: t.shape, rows, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.data[i * d..(i + 1) * d]
    }

    pub fn tensor(&self, i: usize) -> StateTensor {
        StateTensor { shape: self.shape, data: self.row(i).to_vec() }
    }

    /// Copies the listed rows into a new batch.
    pub fn select(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.dim());
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self { shape: self.shape, rows: rows.len(), data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_like(&self, other: &StateBatch) -> Result<()> {
        if self.shape != other.shape || self.rows != other.rows {
            return Err(invalid(format!(
                "batch mismatch: {:?}x{} vs {:?}x{}",
                self.shape, self.rows, other.shape, other.rows
            )));
        }
        Ok(())
    }
}

/// Binary per-site mask; `true` marks an observed site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteMask {
    lattice: (usize, usize, usize),
    bits: Vec<bool>,
}

impl SiteMask {
    pub fn new(lattice: (usize, usize, usize), bits: Vec<bool>) -> Result<Self> {
        if bits.len() != lattice.0 * lattice.1 * lattice.2 {
            return Err(invalid(format!(
                "mask has {} bits for lattice {:?}",
                bits.len(),
                lattice
            )));
        }
        Ok(Self { lattice, bits })
    }

    pub fn filled(lattice: (usize, usize, usize), value: bool) -> Self {
        Self { lattice, bits: vec![value; lattice.0 * lattice.1 * lattice.2] }
    }

    pub fn from_fn(
        lattice: (usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Self {
        let mut bits = Vec::with_capacity(lattice.0 * lattice.1 * lattice.2);
        for l in 0..lattice.0 {
            for h in 0..lattice.1 {
                for w in 0..lattice.2 {
                    bits.push(f(l, h, w));
                }
            }
        }
        Self { lattice, bits }
    }

    pub fn lattice(&self) -> (usize, usize, usize) {
        self.lattice
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_observed(&self, site: usize) -> bool {
        self.bits[site]
    }

    pub fn complement(&self) -> Self {
        Self { lattice: self.lattice, bits: self.bits.iter().map(|b| !b).collect() }
    }

    pub fn observed_sites(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&s| self.bits[s]).collect()
    }

    pub fn unobserved_sites(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&s| !self.bits[s]).collect()
    }

    pub fn check_shape(&self, shape: Shape) -> Result<()> {
        if self.lattice != shape.lattice() {
            return Err(invalid(format!(
                "mask lattice {:?} does not match state shape {:?}",
                self.lattice, shape
            )));
        }
        Ok(())
    }

    /// Flat coordinate indices (all channels) of observed sites.
    pub fn observed_coords(&self, shape: Shape) -> Vec<usize> {
        coords_of(shape, &self.observed_sites())
    }

    /// Flat coordinate indices (all channels) of unobserved sites.
    pub fn unobserved_coords(&self, shape: Shape) -> Vec<usize> {
        coords_of(shape, &self.unobserved_sites())
    }
}

pub(crate) fn coords_of(shape: Shape, sites: &[usize]) -> Vec<usize> {
    let s = shape.sites();
    let mut out = Vec::with_capacity(sites.len() * shape.c);
    for c in 0..shape.c {
        out.extend(sites.iter().map(|&site| c * s + site));
    }
    out
}

/// `M ⊙ a + (1 − M) ⊙ b`, by selection so observed values are copied bit-exactly.
pub fn mask_compose(a: &StateTensor, b: &StateTensor, mask: &SiteMask) -> Result<StateTensor> {
    if a.shape != b.shape {
        return Err(invalid("mask_compose: shapes differ"));
    }
    mask.check_shape(a.shape)?;
    let mut out = b.data.clone();
    compose_row(&mut out, &a.data, a.shape, mask);
    Ok(StateTensor { shape: a.shape, data: out })
}

/// Row-wise `mask_compose` over a batch. `a` may have one row (broadcast).
pub fn mask_compose_batch(a: &StateBatch, b: &StateBatch, mask: &SiteMask) -> Result<StateBatch> {
    if a.shape != b.shape || (a.rows != b.rows && a.rows != 1) {
        return Err(invalid("mask_compose_batch: shapes differ"));
    }
    mask.check_shape(a.shape)?;
    let mut out = b.clone();
    for i in 0..b.rows {
        let src = if a.rows == 1 { a.row(0) } else { a.row(i) };
        compose_row(out.row_mut(i), src, a.shape, mask);
    }
    Ok(out)
}

/// Overwrites the observed coordinates of `dst` with those of `observed`.
pub(crate) fn compose_row(dst: &mut [f64], observed: &[f64], shape: Shape, mask: &SiteMask) {
    let s = shape.sites();
    for c in 0..shape.c {
        for site in 0..s {
            if mask.bits[site] {
                dst[c * s + site] = observed[c * s + site];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSizes {
    pub l: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchSizes {
    pub const fn new(l: usize, h: usize, w: usize) -> Self {
        Self { l, h, w }
    }
}

impl Default for PatchSizes {
    fn default() -> Self {
        Self::new(4, 4, 4)
    }
}

/// Origin-anchored tiling of the unobserved sites into boxes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPartition {
    sizes: PatchSizes,
    patches: Vec<Vec<usize>>,
}

impl PatchPartition {
    pub fn sizes(&self) -> PatchSizes {
        self.sizes
    }

    pub fn patches(&self) -> &[Vec<usize>] {
        &self.patches
    }

    pub fn count(&self) -> usize {
        self.patches.len()
    }

    /// Flat coordinate indices (all channels) of each patch.
    pub fn patch_coords(&self, shape: Shape) -> Vec<Vec<usize>> {
        self.patches.iter().map(|p| coords_of(shape, p)).collect()
    }
}

pub fn partition_complement(mask: &SiteMask, sizes: PatchSizes) -> Result<PatchPartition> {
    if sizes.l == 0 || sizes.h == 0 || sizes.w == 0 {
        return Err(invalid("patch sizes must be positive"));
    }
    let (nl, nh, nw) = mask.lattice;
    let boxes = |n: usize, p: usize| n.div_ceil(p);
    let mut patches = Vec::new();
    for bl in 0..boxes(nl, sizes.l) {
        for bh in 0..boxes(nh, sizes.h) {
            for bw in 0..boxes(nw, sizes.w) {
                let mut patch = Vec::new();
                for l in bl * sizes.l..((bl + 1) * sizes.l).min(nl) {
                    for h in bh * sizes.h..((bh + 1) * sizes.h).min(nh) {
                        for w in bw * sizes.w..((bw + 1) * sizes.w).min(nw) {
                            let site = (l * nh + h) * nw + w;
                            if !mask.bits[site] {
                                patch.push(site);
                            }
                        }
                    }
                }
                if !patch.is_empty() {
                    patches.push(patch);
                }
            }
        }
    }
    Ok(PatchPartition { sizes, patches })
}
