//! Grid-based path-integral evolution of short-time conditional densities.
//!
//! A [`Kernel`] holds, for every source cell, the short-time Gaussian density
//! over `dt` (mean `x + drift·dt`, variance `diffusion·dt` per axis) truncated
//! to a band around the target and renormalized. Diffusion is diagonal, so
//! each row factorizes into one weight vector per axis; rows are stored in
//! that separable form and applied as an outer product.
//!
//! Cells at the grid edge lose the mass that would fall outside the grid;
//! row normalization puts it back inside (truncate-and-renormalize), which
//! biases densities that press against the boundary.

use std::f64::consts::PI;
use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::smni::{local_dynamics, ColumnParams, FiringState, SmniError};

/// Default upper bound on the number of grid cells.
pub const DEFAULT_MAX_CELLS: usize = 1 << 22;

#[derive(Debug, Error)]
pub enum PathintError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("distributions or kernel live on different grids")]
    GridMismatch,
    #[error("band on axis {axis} covers {covered:.4} but 3σ = {needed:.4} at cell {cell:?}; widen the bandwidth")]
    BandTooNarrow { cell: Vec<usize>, axis: usize, covered: f64, needed: f64 },
    #[error("dynamics: {0}")]
    Dynamics(#[from] SmniError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub label: String,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(label: impl Into<String>, lo: f64, hi: f64, n: usize) -> Self {
        Self { label: label.into(), lo, hi, n }
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.spacing()
    }

    /// Nearest node, clamped to the axis.
    pub fn nearest(&self, x: f64) -> usize {
        let k = ((x - self.lo) / self.spacing()).round();
        if k.is_nan() || k < 0.0 {
            0
        } else {
            (k as usize).min(self.n - 1)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Axis>,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self, PathintError> {
        Self::with_cap(axes, DEFAULT_MAX_CELLS)
    }

    pub fn with_cap(axes: Vec<Axis>, max_cells: usize) -> Result<Self, PathintError> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(PathintError::InvalidGrid(format!("expected 1 or 2 axes, got {}", axes.len())));
        }
        for a in &axes {
            if a.n < 3 {
                return Err(PathintError::InvalidGrid(format!("axis {} needs at least 3 points", a.label)));
            }
            if !(a.lo.is_finite() && a.hi.is_finite() && a.lo < a.hi) {
                return Err(PathintError::InvalidGrid(format!("axis {} needs lo < hi", a.label)));
            }
        }
        let cells: usize = axes.iter().map(|a| a.n).product();
        if cells > max_cells {
            return Err(PathintError::InvalidGrid(format!("{cells} cells exceeds the cap of {max_cells}")));
        }
        Ok(Self { axes })
    }

    /// Grid spanning the firing box of a macrocolumn with the given spacings.
    pub fn firing_space(params: &ColumnParams, spacing: [f64; 2]) -> Result<Self, PathintError> {
        let axis = |label: &str, n_g: f64, h: f64| {
            let n = (2.0 * n_g / h).round() as usize + 1;
            Axis::new(label, -n_g, n_g, n)
        };
        Self::new(vec![axis("m_e", params.n_e, spacing[0]), axis("m_i", params.n_i, spacing[1])])
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn cells(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    /// Row-major flat index (last axis fastest).
    pub fn index(&self, cell: &[usize]) -> usize {
        cell.iter().zip(&self.axes).fold(0, |acc, (&c, a)| acc * a.n + c)
    }

    pub fn unravel(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for (d, a) in self.axes.iter().enumerate().rev() {
            out[d] = idx % a.n;
            idx /= a.n;
        }
        out
    }

    pub fn center(&self, idx: usize) -> Vec<f64> {
        self.unravel(idx).iter().zip(&self.axes).map(|(&c, a)| a.coord(c)).collect()
    }

    pub fn nearest_cell(&self, x: &[f64]) -> usize {
        let cell: Vec<usize> = x.iter().zip(&self.axes).map(|(&v, a)| a.nearest(v)).collect();
        self.index(&cell)
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(Axis::spacing).product()
    }
}

/// Nonnegative weights over grid cells summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDistribution {
    grid: Grid,
    weights: Vec<f64>,
}

impl GridDistribution {
    /// Normalizes `weights`; errors on negative, non-finite or all-zero input.
    pub fn new(grid: Grid, weights: Vec<f64>) -> Result<Self, PathintError> {
        if weights.len() != grid.cells() {
            return Err(PathintError::InvalidInput(format!("{} weights for {} cells", weights.len(), grid.cells())));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(PathintError::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let mut d = Self { grid, weights };
        let total = d.total();
        if !(total > 0.0) {
            return Err(PathintError::InvalidInput("weights sum to zero".into()));
        }
        d.scale(1.0 / total);
        Ok(d)
    }

    pub fn delta(grid: Grid, at: &[f64]) -> Self {
        let mut w = vec![0.0; grid.cells()];
        w[grid.nearest_cell(at)] = 1.0;
        Self { grid, weights: w }
    }

    /// Product Gaussian sampled at cell centers.
    pub fn gaussian(grid: Grid, mean: &[f64], sd: &[f64]) -> Result<Self, PathintError> {
        let w = (0..grid.cells())
            .map(|i| {
                let c = grid.center(i);
                c.iter().zip(mean).zip(sd).map(|((x, m), s)| (-(x - m) * (x - m) / (2.0 * s * s)).exp()).product()
            })
            .collect();
        Self::new(grid, w)
    }

    /// Histogram of points on the nearest cells.
    pub fn from_samples<'a, I>(grid: Grid, samples: I) -> Result<Self, PathintError>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut w = vec![0.0; grid.cells()];
        for s in samples {
            w[grid.nearest_cell(s)] += 1.0;
        }
        Self::new(grid, w)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn scale(&mut self, f: f64) {
        self.weights.iter_mut().for_each(|w| *w *= f);
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.grid.dim()];
        for (i, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (d, x) in self.grid.center(i).into_iter().enumerate() {
                m[d] += w * x;
            }
        }
        m
    }

    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let m = self.mean();
        let d = self.grid.dim();
        let mut c = vec![vec![0.0; d]; d];
        for (i, &w) in self.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let x = self.grid.center(i);
            for a in 0..d {
                for b in 0..d {
                    c[a][b] += w * (x[a] - m[a]) * (x[b] - m[b]);
                }
            }
        }
        c
    }

    /// Writes `label_0[,label_1],weight`, one row per cell.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let labels: Vec<&str> = self.grid.axes.iter().map(|a| a.label.as_str()).collect();
        writeln!(w, "{},weight", labels.join(","))?;
        for (i, wt) in self.weights.iter().enumerate() {
            let c: Vec<String> = self.grid.center(i).iter().map(|x| x.to_string()).collect();
            writeln!(w, "{},{}", c.join(","), wt)?;
        }
        Ok(())
    }

    /// Reads the format of [`write_csv`](Self::write_csv) onto `grid`.
    pub fn read_csv<R: BufRead>(grid: Grid, r: R) -> Result<Self, PathintError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| PathintError::Csv("empty file".into()))??;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() != grid.dim() + 1 || cols[grid.dim()] != "weight" {
            return Err(PathintError::Csv(format!("unexpected header `{header}`")));
        }
        let mut w = vec![0.0; grid.cells()];
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| PathintError::Csv(format!("line {}: {e}", ln + 2)))?;
            if vals.len() != grid.dim() + 1 {
                return Err(PathintError::Csv(format!("line {}: expected {} fields", ln + 2, grid.dim() + 1)));
            }
            let idx = grid.nearest_cell(&vals[..grid.dim()]);
            let center = grid.center(idx);
            for (d, a) in grid.axes.iter().enumerate() {
                if (center[d] - vals[d]).abs() > 1e-6 * a.spacing() {
                    return Err(PathintError::Csv(format!("line {}: coordinate off the grid", ln + 2)));
                }
            }
            w[idx] += vals[grid.dim()];
        }
        Self::new(grid, w)
    }
}

/// Sum of absolute weight differences.
pub fn l1_change(a: &GridDistribution, b: &GridDistribution) -> Result<f64, PathintError> {
    if a.grid != b.grid {
        return Err(PathintError::GridMismatch);
    }
    Ok(a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y).abs()).sum())
}

/// Drift and diagonal diffusion of a diffusion process.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;
    fn drift_diffusion(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PathintError>;
}

/// One-dimensional Ornstein-Uhlenbeck process: drift `-(x - center)/tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrnsteinUhlenbeck {
    pub tau: f64,
    pub diffusion: f64,
    #[serde(default)]
    pub center: f64,
}

impl OrnsteinUhlenbeck {
    pub fn stationary_variance(&self) -> f64 {
        self.diffusion * self.tau / 2.0
    }

    pub fn mean_at(&self, m0: f64, t: f64) -> f64 {
        self.center + (m0 - self.center) * (-t / self.tau).exp()
    }

    pub fn variance_at(&self, v0: f64, t: f64) -> f64 {
        let decay = (-2.0 * t / self.tau).exp();
        self.stationary_variance() * (1.0 - decay) + v0 * decay
    }
}

impl Dynamics for OrnsteinUhlenbeck {
    fn dim(&self) -> usize {
        1
    }

    fn drift_diffusion(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PathintError> {
        Ok((vec![-(x[0] - self.center) / self.tau], vec![self.diffusion]))
    }
}

/// Spatially constant drift and diffusion.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantDynamics {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
}

impl Dynamics for ConstantDynamics {
    fn dim(&self) -> usize {
        self.drift.len()
    }

    fn drift_diffusion(&self, _x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PathintError> {
        Ok((self.drift.clone(), self.diffusion.clone()))
    }
}

/// Macrocolumn dynamics over `(M^E, M^I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnDynamics {
    pub params: ColumnParams,
}

impl Dynamics for ColumnDynamics {
    fn dim(&self) -> usize {
        2
    }

    fn drift_diffusion(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PathintError> {
        let d = local_dynamics(FiringState::new(x[0], x[1]), &self.params)?;
        Ok((d.drift.to_vec(), d.diffusion.to_vec()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Fixed half-width in cells per axis; must cover 3σ everywhere.
    Cells(Vec<usize>),
    /// Per-cell half-width of this many local standard deviations (≥ 3).
    Sigmas(f64),
}

/// One row: per-axis start cell and normalized weights.
#[derive(Clone, Debug, PartialEq)]
struct KernelRow {
    start: [usize; 2],
    weights: [Vec<f64>; 2],
    leakage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelStats {
    pub rows: usize,
    pub nonzeros: usize,
    pub max_row_width: Vec<usize>,
    pub mean_row_entries: f64,
    /// Largest Gaussian mass lost to band or grid truncation before row normalization.
    pub max_leakage: f64,
    pub mean_leakage: f64,
}

/// Banded row-stochastic transition matrix over grid cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    grid: Grid,
    dt: f64,
    rows: Vec<KernelRow>,
}

fn axis_weights(axis: &Axis, mean: f64, sigma: f64, half_width: usize) -> (usize, Vec<f64>, f64) {
    let center = axis.nearest(mean);
    let start = center.saturating_sub(half_width);
    let end = (center + half_width).min(axis.n - 1);
    if sigma == 0.0 {
        return (center, vec![1.0], 0.0);
    }
    let h = axis.spacing();
    let mut w: Vec<f64> = (start..=end)
        .map(|k| {
            let z = (axis.coord(k) - mean) / sigma;
            (-0.5 * z * z).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) {
        return (center, vec![1.0], 1.0);
    }
    let captured = sum * h / ((2.0 * PI).sqrt() * sigma);
    w.iter_mut().for_each(|x| *x /= sum);
    (start, w, (1.0 - captured).max(0.0))
}

/// Build the short-time transition kernel of `dynamics` on `grid` over `dt`.
pub fn build_kernel<D: Dynamics + ?Sized>(
    dynamics: &D,
    grid: &Grid,
    dt: f64,
    bandwidth: &Bandwidth,
) -> Result<Kernel, PathintError> {
    if !(dt > 0.0) {
        return Err(PathintError::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    if dynamics.dim() != grid.dim() {
        return Err(PathintError::InvalidInput(format!(
            "dynamics has dimension {} but grid has {}",
            dynamics.dim(),
            grid.dim()
        )));
    }
    match bandwidth {
        Bandwidth::Cells(c) if c.len() != grid.dim() => {
            return Err(PathintError::InvalidInput("bandwidth needs one entry per axis".into()))
        }
        Bandwidth::Sigmas(s) if !(*s >= 3.0) => {
            return Err(PathintError::InvalidInput(format!("bandwidth of {s}σ is below 3σ")))
        }
        _ => {}
    }
    let rows: Result<Vec<KernelRow>, PathintError> = (0..grid.cells())
        .into_par_iter()
        .map(|i| {
            let x = grid.center(i);
            let (drift, diffusion) = dynamics.drift_diffusion(&x)?;
            let mut row = KernelRow { start: [0; 2], weights: [vec![1.0], vec![1.0]], leakage: 0.0 };
            let mut kept = 1.0;
            for (d, axis) in grid.axes().iter().enumerate() {
                let mean = x[d] + drift[d] * dt;
                let sigma = (diffusion[d] * dt).max(0.0).sqrt();
                let half = match bandwidth {
                    Bandwidth::Cells(c) => {
                        let covered = c[d] as f64 * axis.spacing();
                        if covered < 3.0 * sigma {
                            return Err(PathintError::BandTooNarrow {
                                cell: grid.unravel(i),
                                axis: d,
                                covered,
                                needed: 3.0 * sigma,
                            });
                        }
                        c[d]
                    }
                    Bandwidth::Sigmas(s) => ((s * sigma / axis.spacing()).ceil() as usize).max(1),
                };
                let (start, w, leak) = axis_weights(axis, mean, sigma, half);
                row.start[d] = start;
                row.weights[d] = w;
                kept *= 1.0 - leak;
            }
            row.leakage = 1.0 - kept;
            Ok(row)
        })
        .collect();
    Ok(Kernel { grid: grid.clone(), dt, rows: rows? })
}

impl Kernel {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Nonzero entries `(target cell, weight)` of row `i`.
    pub fn row(&self, i: usize) -> Vec<(usize, f64)> {
        let r = &self.rows[i];
        let mut out = Vec::new();
        if self.grid.dim() == 1 {
            for (a, w) in r.weights[0].iter().enumerate() {
                out.push((r.start[0] + a, *w));
            }
        } else {
            let n1 = self.grid.axes[1].n;
            for (a, wa) in r.weights[0].iter().enumerate() {
                for (b, wb) in r.weights[1].iter().enumerate() {
                    out.push(((r.start[0] + a) * n1 + r.start[1] + b, wa * wb));
                }
            }
        }
        out
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.row(i).into_iter().find(|(c, _)| *c == j).map_or(0.0, |(_, w)| w)
    }

    pub fn stats(&self) -> KernelStats {
        let dim = self.grid.dim();
        let mut max_w = vec![0; dim];
        let mut nnz = 0;
        let mut max_leak: f64 = 0.0;
        let mut sum_leak = 0.0;
        for r in &self.rows {
            let mut entries = 1;
            for d in 0..dim {
                max_w[d] = max_w[d].max(r.weights[d].len());
                entries *= r.weights[d].len();
            }
            nnz += entries;
            max_leak = max_leak.max(r.leakage);
            sum_leak += r.leakage;
        }
        let rows = self.rows.len();
        KernelStats {
            rows,
            nonzeros: nnz,
            max_row_width: max_w,
            mean_row_entries: nnz as f64 / rows as f64,
            max_leakage: max_leak,
            mean_leakage: sum_leak / rows as f64,
        }
    }

    /// One application `p ← p·K` without renormalization.
    fn apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; p.len()];
        let dim = self.grid.dim();
        let n1 = if dim == 2 { self.grid.axes[1].n } else { 1 };
        for (r, &pi) in self.rows.iter().zip(p) {
            if pi == 0.0 {
                continue;
            }
            if dim == 1 {
                for (a, w) in r.weights[0].iter().enumerate() {
                    out[r.start[0] + a] += pi * w;
                }
            } else {
                for (a, wa) in r.weights[0].iter().enumerate() {
                    let base = (r.start[0] + a) * n1 + r.start[1];
                    let pa = pi * wa;
                    for (b, wb) in r.weights[1].iter().enumerate() {
                        out[base + b] += pa * wb;
                    }
                }
            }
        }
        out
    }
}

/// Per-step mass before renormalization, for diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvolveReport {
    pub raw_mass: Vec<f64>,
}

impl EvolveReport {
    pub fn max_mass_error(&self) -> f64 {
        self.raw_mass.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max)
    }
}

pub fn evolve(dist: &GridDistribution, kernel: &Kernel, steps: usize) -> Result<GridDistribution, PathintError> {
    evolve_observed(dist, kernel, steps, |_, _| {}).map(|(d, _)| d)
}

/// Evolve `steps` times, calling `observe(step, dist)` after each
/// renormalized step (step counts from 1).
pub fn evolve_observed<F>(
    dist: &GridDistribution,
    kernel: &Kernel,
    steps: usize,
    mut observe: F,
) -> Result<(GridDistribution, EvolveReport), PathintError>
where
    F: FnMut(usize, &GridDistribution),
{
    if dist.grid != kernel.grid {
        return Err(PathintError::GridMismatch);
    }
    let mut cur = dist.clone();
    let mut report = EvolveReport::default();
    for step in 1..=steps {
        let next = kernel.apply(&cur.weights);
        let mass: f64 = next.iter().sum();
        report.raw_mass.push(mass);
        cur.weights = next;
        cur.scale(1.0 / mass);
        observe(step, &cur);
    }
    Ok((cur, report))
}

/// Diagonal line through the grid given by its two endpoint cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TroughSpec {
    pub from: Vec<usize>,
    pub to: Vec<usize>,
    /// Maxima below `floor × max(profile)` are ignored.
    #[serde(default = "default_floor")]
    pub floor: f64,
}

fn default_floor() -> f64 {
    1e-6
}

impl TroughSpec {
    pub fn new(from: Vec<usize>, to: Vec<usize>) -> Self {
        Self { from, to, floor: default_floor() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalMaximum {
    /// Position along the profile.
    pub along: usize,
    pub cell: Vec<usize>,
    pub position: Vec<f64>,
    pub weight: f64,
}

/// Cells visited by the trough line, one per step of the longest axis.
pub fn trough_cells(grid: &Grid, trough: &TroughSpec) -> Result<Vec<usize>, PathintError> {
    if trough.from.len() != grid.dim() || trough.to.len() != grid.dim() {
        return Err(PathintError::InvalidInput("trough endpoints must match grid dimension".into()));
    }
    for (d, a) in grid.axes().iter().enumerate() {
        if trough.from[d] >= a.n || trough.to[d] >= a.n {
            return Err(PathintError::InvalidInput("trough endpoint outside the grid".into()));
        }
    }
    let span = (0..grid.dim()).map(|d| trough.from[d].abs_diff(trough.to[d])).max().unwrap_or(0);
    if span < 2 {
        return Err(PathintError::InvalidInput("trough profile is empty (needs at least 3 cells)".into()));
    }
    Ok((0..=span)
        .map(|t| {
            let cell: Vec<usize> = (0..grid.dim())
                .map(|d| {
                    let a = trough.from[d] as f64;
                    let b = trough.to[d] as f64;
                    (a + (b - a) * t as f64 / span as f64).round() as usize
                })
                .collect();
            grid.index(&cell)
        })
        .collect())
}

/// Strict interior local maxima of the density along the trough line.
pub fn stationary_scan(dist: &GridDistribution, trough: &TroughSpec) -> Result<Vec<LocalMaximum>, PathintError> {
    let cells = trough_cells(&dist.grid, trough)?;
    let profile: Vec<f64> = cells.iter().map(|&c| dist.weights[c]).collect();
    let top = profile.iter().copied().fold(0.0, f64::max);
    let floor = trough.floor * top;
    let mut out = Vec::new();
    for k in 1..profile.len() - 1 {
        let w = profile[k];
        if w > profile[k - 1] && w > profile[k + 1] && w > floor {
            out.push(LocalMaximum {
                along: k,
                cell: dist.grid.unravel(cells[k]),
                position: dist.grid.center(cells[k]),
                weight: w,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, lo: f64, hi: f64) -> Grid {
        Grid::new(vec![Axis::new("x", lo, hi, n)]).unwrap()
    }

    #[test]
    fn grid_indexing_round_trips() {
        let g = Grid::new(vec![Axis::new("a", 0.0, 1.0, 5), Axis::new("b", -1.0, 1.0, 7)]).unwrap();
        for i in 0..g.cells() {
            assert_eq!(g.index(&g.unravel(i)), i);
            assert_eq!(g.nearest_cell(&g.center(i)), i);
        }
        assert!(Grid::new(vec![Axis::new("a", 0.0, 1.0, 2)]).is_err());
        assert!(Grid::with_cap(vec![Axis::new("a", 0.0, 1.0, 100)], 50).is_err());
    }

    #[test]
    fn zero_diffusion_gives_identity() {
        let g = Grid::new(vec![Axis::new("a", 0.0, 1.0, 5), Axis::new("b", 0.0, 1.0, 4)]).unwrap();
        let dynamics = ConstantDynamics { drift: vec![0.0, 0.0], diffusion: vec![0.0, 0.0] };
        let k = build_kernel(&dynamics, &g, 0.1, &Bandwidth::Sigmas(4.0)).unwrap();
        for i in 0..g.cells() {
            assert_eq!(k.row(i), vec![(i, 1.0)]);
        }
        let p = GridDistribution::gaussian(g.clone(), &[0.5, 0.5], &[0.3, 0.3]).unwrap();
        assert_eq!(evolve(&p, &k, 17).unwrap(), p);
    }

    #[test]
    fn rows_match_discrete_gaussian() {
        let g = line(201, -10.0, 10.0);
        let sigma2 = 0.8;
        let dt = 0.5;
        let dynamics = ConstantDynamics { drift: vec![0.0], diffusion: vec![sigma2] };
        let k = build_kernel(&dynamics, &g, dt, &Bandwidth::Sigmas(8.0)).unwrap();
        let i = 100;
        let raw: Vec<f64> = (0..201)
            .map(|j| {
                let x = g.center(j)[0];
                (-(x * x) / (2.0 * sigma2 * dt)).exp()
            })
            .collect();
        let z: f64 = raw.iter().sum();
        for j in 0..201 {
            assert!((k.entry(i, j) - raw[j] / z).abs() < 1e-6);
        }
        for i in 0..201 {
            let s: f64 = k.row(i).iter().map(|e| e.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn drift_shifts_row_argmax() {
        let g = line(101, 0.0, 10.0);
        let mu = 1.37;
        let dt = 1.0;
        let dynamics = ConstantDynamics { drift: vec![mu], diffusion: vec![0.05] };
        let k = build_kernel(&dynamics, &g, dt, &Bandwidth::Sigmas(5.0)).unwrap();
        let i = 20;
        let argmax = k.row(i).into_iter().max_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap().0;
        let h = g.axes()[0].spacing();
        assert_eq!(argmax as i64 - i as i64, (mu * dt / h).round() as i64);
    }

    #[test]
    fn narrow_band_is_rejected() {
        let g = line(51, -5.0, 5.0);
        let dynamics = ConstantDynamics { drift: vec![0.0], diffusion: vec![1.0] };
        let err = build_kernel(&dynamics, &g, 1.0, &Bandwidth::Cells(vec![10])).unwrap_err();
        assert!(matches!(err, PathintError::BandTooNarrow { axis: 0, .. }));
        assert!(build_kernel(&dynamics, &g, 1.0, &Bandwidth::Cells(vec![15])).is_ok());
        assert!(build_kernel(&dynamics, &g, 1.0, &Bandwidth::Sigmas(2.0)).is_err());
    }

    #[test]
    fn ou_moments_match_analytic() {
        let ou = OrnsteinUhlenbeck { tau: 1.0, diffusion: 2.0, center: 0.0 };
        let g = line(201, -8.0, 8.0);
        let m0 = 3.0;
        let sd0 = 0.5;
        let p0 = GridDistribution::gaussian(g.clone(), &[m0], &[sd0]).unwrap();
        let v0 = p0.covariance()[0][0];
        let dt = 0.002;
        let steps = (5.0 / dt) as usize;
        let k = build_kernel(&ou, &g, dt, &Bandwidth::Sigmas(6.0)).unwrap();
        let (p, report) = evolve_observed(&p0, &k, steps, |_, d| {
            assert!((d.total() - 1.0).abs() < 1e-12);
        })
        .unwrap();
        assert!(report.max_mass_error() < 1e-12);
        let t = steps as f64 * dt;
        let m = p.mean()[0];
        let v = p.covariance()[0][0];
        let m_exact = ou.mean_at(p0.mean()[0], t);
        let v_exact = ou.variance_at(v0, t);
        assert!(((m - m_exact) / m_exact).abs() < 0.02, "{m} vs {m_exact}");
        assert!(((v - v_exact) / v_exact).abs() < 0.02, "{v} vs {v_exact}");
    }

    #[test]
    fn pure_diffusion_variance_is_linear() {
        let g = line(401, -20.0, 20.0);
        let d = 0.5;
        let dt = 0.5;
        let dynamics = ConstantDynamics { drift: vec![0.0], diffusion: vec![d] };
        let k = build_kernel(&dynamics, &g, dt, &Bandwidth::Sigmas(6.0)).unwrap();
        let p0 = GridDistribution::delta(g.clone(), &[0.0]);
        let mut vars = Vec::new();
        evolve_observed(&p0, &k, 50, |_, p| vars.push(p.covariance()[0][0])).unwrap();
        let slope = (vars[49] - vars[0]) / (49.0 * dt);
        assert!((slope / d - 1.0).abs() < 0.02, "slope {slope}");
    }

    #[test]
    fn scan_counts_modes() {
        let g = Grid::new(vec![Axis::new("a", -10.0, 10.0, 81), Axis::new("b", -10.0, 10.0, 81)]).unwrap();
        let uni = GridDistribution::gaussian(g.clone(), &[2.0, 2.0], &[1.5, 1.5]).unwrap();
        let trough = TroughSpec::new(vec![0, 0], vec![80, 80]);
        let m = stationary_scan(&uni, &trough).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].position, vec![2.0, 2.0]);

        let a = GridDistribution::gaussian(g.clone(), &[-5.0, -5.0], &[1.0, 1.0]).unwrap();
        let b = GridDistribution::gaussian(g.clone(), &[4.0, 4.0], &[1.0, 1.0]).unwrap();
        let mix: Vec<f64> = a.weights().iter().zip(b.weights()).map(|(x, y)| 0.4 * x + 0.6 * y).collect();
        let mix = GridDistribution::new(g.clone(), mix).unwrap();
        let m = stationary_scan(&mix, &trough).unwrap();
        let pos: Vec<Vec<f64>> = m.iter().map(|x| x.position.clone()).collect();
        assert_eq!(pos, vec![vec![-5.0, -5.0], vec![4.0, 4.0]]);

        assert!(stationary_scan(&mix, &TroughSpec::new(vec![3, 3], vec![4, 4])).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let g = Grid::new(vec![Axis::new("m_e", -2.0, 2.0, 5), Axis::new("m_i", -1.0, 1.0, 3)]).unwrap();
        let p = GridDistribution::gaussian(g.clone(), &[0.3, 0.1], &[1.0, 0.7]).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("m_e,m_i,weight\n"));
        let q = GridDistribution::read_csv(g.clone(), &buf[..]).unwrap();
        for (a, b) in p.weights().iter().zip(q.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
        let other = Grid::new(vec![Axis::new("m_e", -2.0, 2.0, 9), Axis::new("m_i", -1.0, 1.0, 3)]).unwrap();
        assert!(l1_change(&p, &GridDistribution::delta(other, &[0.0, 0.0])).is_err());
    }
}
