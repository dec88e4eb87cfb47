//! Block-precision conditional-independence diagnostic along one lattice axis.
//!
//! Lines along the axis are stacked into an `N_s × (positions · C)` design
//! matrix, standardized per column, and the ridge-regularized precision is
//! split into `C × C` blocks per position pair. The top canonical partial
//! correlation `ρ₁` of each block pair measures dependence between two
//! positions after regressing out the rest of the line.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, HctlError, Result};
use crate::linalg::{spd_inverse, sym_inv_sqrt, symmetrize};
use crate::schedule::StateTensor;

/// Relative ridge added to the sample covariance before inversion.
pub const RIDGE: f64 = 1e-6;
const EIGEN_FLOOR: f64 = 1e-12;
const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    L,
    H,
    W,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::L, Axis::H, Axis::W];

    pub fn name(self) -> &'static str {
        match self {
            Axis::L => "L",
            Axis::H => "H",
            Axis::W => "W",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineStack {
    pub axis: Axis,
    pub lines: usize,
    pub positions: usize,
    pub channels: usize,
    /// Row-major `lines × (positions · channels)`, position-major within a row,
    /// standardized per column.
    pub data: Vec<f64>,
    /// Columns whose spread fell below the standardization floor.
    pub flat_columns: Vec<usize>,
}

impl LineStack {
    pub fn width(&self) -> usize {
        self.positions * self.channels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.data[i * w..(i + 1) * w]
    }
}

/// Neumaier-compensated sum.
fn compensated_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn build_line_stack(samples: &[StateTensor], axis: Axis) -> Result<LineStack> {
    let first = samples.first().ok_or_else(|| invalid("line stack needs at least one sample"))?;
    let shape = first.shape();
    if samples.iter().any(|s| s.shape() != shape) {
        return Err(invalid("line stack samples differ in shape"));
    }
    let (nl, nh, nw) = shape.lattice();
    let c = shape.c;
    let positions = match axis {
        Axis::L => nl,
        Axis::H => nh,
        Axis::W => nw,
    };
    let per_sample = shape.sites() / positions;
    let lines = samples.len() * per_sample;
    let width = positions * c;
    let mut data = Vec::with_capacity(lines * width);
    for s in samples {
        // Off-axis positions in lattice order.
        for a in 0..nl {
            for b in 0..nh {
                for e in 0..nw {
                    let on_axis = match axis {
                        Axis::L => a,
                        Axis::H => b,
                        Axis::W => e,
                    };
                    if on_axis != 0 {
                        continue;
                    }
                    for p in 0..positions {
                        let (l, h, w) = match axis {
                            Axis::L => (p, b, e),
                            Axis::H => (a, p, e),
                            Axis::W => (a, b, p),
                        };
                        let site = shape.site_index(l, h, w);
                        for ch in 0..c {
                            data.push(s.get(ch, site));
                        }
                    }
                }
            }
        }
    }
    let mut flat_columns = Vec::new();
    if lines > 1 {
        for col in 0..width {
            let column = || (0..lines).map(|r| data[r * width + col]);
            let mean = compensated_sum(column()) / lines as f64;
            let var = compensated_sum(column().map(|x| (x - mean) * (x - mean))) / (lines - 1) as f64;
            let mut sd = var.sqrt();
            if !(sd > STD_FLOOR) {
                sd = STD_FLOOR;
                flat_columns.push(col);
            }
            for r in 0..lines {
                let v = &mut data[r * width + col];
                *v = (*v - mean) / sd;
            }
        }
    }
    Ok(LineStack { axis, lines, positions, channels: c, data, flat_columns })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPrecision {
    pub positions: usize,
    pub channels: usize,
    pub lines: usize,
    /// Ridge-regularized sample covariance.
    pub covariance: DMatrix<f64>,
    pub precision: DMatrix<f64>,
}

impl BlockPrecision {
    /// The `C × C` precision block between positions `beta` and `gamma`.
    pub fn block(&self, beta: usize, gamma: usize) -> DMatrix<f64> {
        let c = self.channels;
        self.precision.view((beta * c, gamma * c), (c, c)).into_owned()
    }
}

pub fn block_precision(stack: &LineStack) -> Result<BlockPrecision> {
    let p = stack.width();
    if stack.lines <= p {
        return Err(invalid(format!(
            "block precision needs more lines ({}) than coordinates per line ({p})",
            stack.lines
        )));
    }
    let f = DMatrix::from_row_slice(stack.lines, p, &stack.data);
    let mut cov = f.transpose() * &f / (stack.lines - 1) as f64;
    symmetrize(&mut cov);
    let ridge = RIDGE * cov.trace() / p as f64;
    for i in 0..p {
        cov[(i, i)] += ridge;
    }
    let mut precision = spd_inverse(&cov, "ridge-regularized line covariance")?;
    symmetrize(&mut precision);
    Ok(BlockPrecision { positions: stack.positions, channels: stack.channels, lines: stack.lines, covariance: cov, precision })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialCorrelationMap {
    /// `positions × positions` top canonical partial correlations, diagonal 1.
    pub rho: DMatrix<f64>,
    pub noise_floor: f64,
    pub channels: usize,
    pub lines: usize,
}

/// `R_βγ = −Ω_ββ^{-1/2} Ω_βγ Ω_γγ^{-1/2}`.
pub fn partial_correlation_block(bp: &BlockPrecision, beta: usize, gamma: usize) -> Result<DMatrix<f64>> {
    let ib = sym_inv_sqrt(&bp.block(beta, beta), EIGEN_FLOOR)?;
    let ig = if beta == gamma { ib.clone() } else { sym_inv_sqrt(&bp.block(gamma, gamma), EIGEN_FLOOR)? };
    Ok(-(&ib * bp.block(beta, gamma) * &ig))
}

pub fn partial_correlation_map(bp: &BlockPrecision) -> Result<PartialCorrelationMap> {
    let n = bp.positions;
    let inv_sqrt: Vec<DMatrix<f64>> = (0..n)
        .map(|b| sym_inv_sqrt(&bp.block(b, b), EIGEN_FLOOR))
        .collect::<Result<_>>()
        .map_err(|_| HctlError::Numerical("diagonal precision block is not positive definite".into()))?;
    let mut rho = DMatrix::identity(n, n);
    for b in 0..n {
        for g in b + 1..n {
            let r = -(&inv_sqrt[b] * bp.block(b, g) * &inv_sqrt[g]);
            let top = r.singular_values().max().clamp(0.0, 1.0);
            rho[(b, g)] = top;
            rho[(g, b)] = top;
        }
    }
    Ok(PartialCorrelationMap { rho, noise_floor: noise_floor(bp.channels, bp.lines), channels: bp.channels, lines: bp.lines })
}

/// Expected top canonical correlation of independent data, `2√(C/N_s)`.
pub fn noise_floor(channels: usize, lines: usize) -> f64 {
    2.0 * (channels as f64 / lines as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eta {
    pub value: f64,
    /// No off-diagonal mass at all; `value` is then 0.
    pub degenerate: bool,
}

/// Share of squared off-diagonal `ρ₁` mass at distances beyond `r`.
pub fn eta_decay(map: &PartialCorrelationMap, r: usize) -> Eta {
    let n = map.rho.nrows();
    let (mut tail, mut total) = (0.0, 0.0);
    for b in 0..n {
        for g in 0..n {
            if b == g {
                continue;
            }
            let v = map.rho[(b, g)].powi(2);
            total += v;
            if b.abs_diff(g) > r {
                tail += v;
            }
        }
    }
    if total == 0.0 {
        Eta { value: 0.0, degenerate: true }
    } else {
        Eta { value: tail / total, degenerate: false }
    }
}

/// `(r, η(r))` for `r = 0..positions`.
pub fn eta_curve(map: &PartialCorrelationMap) -> Vec<(usize, f64)> {
    (0..map.rho.nrows()).map(|r| (r, eta_decay(map, r).value)).collect()
}

/// Largest off-diagonal `ρ₁` at distance greater than `band`.
pub fn max_beyond(map: &PartialCorrelationMap, band: usize) -> f64 {
    let n = map.rho.nrows();
    let mut m: f64 = 0.0;
    for b in 0..n {
        for g in 0..n {
            if b.abs_diff(g) > band {
                m = m.max(map.rho[(b, g)]);
            }
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisReport {
    pub axis: Axis,
    pub map: PartialCorrelationMap,
    pub eta: Vec<(usize, f64)>,
}

/// Runs the whole diagnostic along one axis.
pub fn analyze_axis(samples: &[StateTensor], axis: Axis) -> Result<AxisReport> {
    let stack = build_line_stack(samples, axis)?;
    let bp = block_precision(&stack)?;
    let map = partial_correlation_map(&bp)?;
    let eta = eta_curve(&map);
    Ok(AxisReport { axis, map, eta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_normal, stream, Stream};
    use crate::schedule::Shape;

    fn noise_samples(shape: Shape, n: usize, seed: u64) -> Vec<StateTensor> {
        let mut rng = stream(seed, Stream::Data, 0);
        (0..n)
            .map(|_| {
                let mut v = vec![0.0; shape.len()];
                fill_normal(&mut rng, &mut v);
                StateTensor::new(shape, v).unwrap()
            })
            .collect()
    }

    #[test]
    fn stack_dimensions() {
        let s = build_line_stack(&noise_samples(Shape::new(1, 4, 4, 4), 10, 1), Axis::W).unwrap();
        assert_eq!((s.lines, s.positions, s.channels), (160, 4, 1));
        let s = build_line_stack(&noise_samples(Shape::new(2, 1, 3, 5), 4, 1), Axis::L).unwrap();
        assert_eq!((s.lines, s.positions, s.width()), (60, 1, 2));
    }

    #[test]
    fn columns_are_standardized() {
        let s = build_line_stack(&noise_samples(Shape::new(2, 3, 4, 5), 50, 2), Axis::H).unwrap();
        for col in 0..s.width() {
            let xs: Vec<f64> = (0..s.lines).map(|r| s.row(r)[col]).collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            assert!(m.abs() < 1e-10 && (v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_column_is_flagged() {
        let shape = Shape::new(1, 1, 1, 3);
        let samples: Vec<StateTensor> =
            (0..5).map(|i| StateTensor::new(shape, vec![i as f64, 2.0, -(i as f64)]).unwrap()).collect();
        let s = build_line_stack(&samples, Axis::W).unwrap();
        assert_eq!(s.flat_columns, vec![1]);
        assert!(s.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn precision_inverts_covariance() {
        let s = build_line_stack(&noise_samples(Shape::new(2, 1, 1, 6), 400, 3), Axis::W).unwrap();
        let bp = block_precision(&s).unwrap();
        let eye = &bp.precision * &bp.covariance;
        assert!((eye - DMatrix::identity(12, 12)).abs().max() < 1e-6);
    }

    #[test]
    fn too_few_lines_rejected() {
        let s = build_line_stack(&noise_samples(Shape::new(1, 1, 1, 4), 4, 3), Axis::W).unwrap();
        assert!(block_precision(&s).is_err());
    }

    #[test]
    fn single_channel_reduces_to_scalar_partial_correlation() {
        let s = build_line_stack(&noise_samples(Shape::new(1, 1, 1, 5), 300, 4), Axis::W).unwrap();
        let bp = block_precision(&s).unwrap();
        let map = partial_correlation_map(&bp).unwrap();
        let o = &bp.precision;
        for b in 0..5 {
            for g in 0..5 {
                if b != g {
                    let want = o[(b, g)].abs() / (o[(b, b)] * o[(g, g)]).sqrt();
                    assert!((map.rho[(b, g)] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn diagonal_blocks_have_unit_singular_values() {
        let s = build_line_stack(&noise_samples(Shape::new(3, 1, 1, 4), 500, 5), Axis::W).unwrap();
        let bp = block_precision(&s).unwrap();
        for b in 0..4 {
            let r = partial_correlation_block(&bp, b, b).unwrap();
            for sv in r.singular_values().iter() {
                assert!((sv - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn eta_examples() {
        let mut rho = DMatrix::identity(4, 4);
        for b in 0..4usize {
            for g in 0..4usize {
                if b.abs_diff(g) == 1 {
                    rho[(b, g)] = 0.7;
                }
            }
        }
        let map = PartialCorrelationMap { rho, noise_floor: 0.0, channels: 1, lines: 10 };
        assert_eq!(eta_decay(&map, 1).value, 0.0);
        assert_eq!(eta_decay(&map, 0).value, 1.0);

        let uniform = PartialCorrelationMap { rho: DMatrix::from_element(4, 4, 0.3), noise_floor: 0.0, channels: 1, lines: 10 };
        assert!((eta_decay(&uniform, 1).value - 0.5).abs() < 1e-12);
        assert_eq!(eta_decay(&uniform, 3).value, 0.0);

        let none = PartialCorrelationMap { rho: DMatrix::identity(3, 3), noise_floor: 0.0, channels: 1, lines: 10 };
        assert_eq!(eta_decay(&none, 0), Eta { value: 0.0, degenerate: true });
    }

    #[test]
    fn noise_floor_examples() {
        assert!((noise_floor(48, 29_000) - 0.0814).abs() < 1e-3);
        assert_eq!(noise_floor(1, 4), 1.0);
        assert!((noise_floor(3, 100) / noise_floor(3, 200) - 2f64.sqrt()).abs() < 1e-12);
    }
}
