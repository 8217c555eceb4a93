//! Gaussian copula: correlation estimation, action, density and event sampling.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use super::marginal::{from_gaussian_flagged, marginal_pdf, to_gaussian, MarginalModel};
use super::RiskError;
use crate::rng::substream;

/// Smallest accepted squared Cholesky pivot.
pub const MIN_PIVOT: f64 = 1e-12;

/// Events drawn per RNG substream in [`sample_events`].
pub const EVENT_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct CopulaModel {
    /// `g^{ij}` of the Gaussianized variables.
    pub corr: DMatrix<f64>,
    /// `g_{ij}`, the inverse of `corr`.
    pub metric: DMatrix<f64>,
    /// `g = det(g^{ij})`
    pub det: f64,
    /// Lower-triangular `C†` with `corr = C† C`.
    pub chol: DMatrix<f64>,
}

impl CopulaModel {
    pub fn identity(n: usize) -> Self {
        Self::from_correlation(DMatrix::identity(n, n)).expect("identity is positive definite")
    }

    /// Validates symmetry and unit diagonal (to 1e-9), then factors.
    pub fn from_correlation(corr: DMatrix<f64>) -> Result<Self, RiskError> {
        let n = corr.nrows();
        if n == 0 || corr.ncols() != n {
            return Err(RiskError::InvalidModel("correlation matrix must be square and nonempty".into()));
        }
        for i in 0..n {
            if (corr[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(RiskError::InvalidModel(format!("correlation diagonal [{i}] = {}", corr[(i, i)])));
            }
            for j in 0..i {
                if (corr[(i, j)] - corr[(j, i)]).abs() > 1e-12 || !corr[(i, j)].is_finite() {
                    return Err(RiskError::InvalidModel(format!("correlation is not symmetric at ({i}, {j})")));
                }
            }
        }
        let not_pd = || {
            RiskError::NotPositiveDefinite(
                "Cholesky factorization failed; enable pre-averaging or widen the estimation window".into(),
            )
        };
        let chol = corr.clone().cholesky().ok_or_else(not_pd)?;
        let l = chol.l();
        if (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min) < MIN_PIVOT {
            return Err(not_pd());
        }
        let metric = chol.inverse();
        let det = (0..n).map(|i| l[(i, i)] * l[(i, i)]).product();
        Ok(Self { corr, metric, det, chol: l })
    }

    pub fn dim(&self) -> usize {
        self.corr.nrows()
    }

    /// `max |C†C − corr|`
    pub fn reconstruction_error(&self) -> f64 {
        (&self.chol * self.chol.transpose() - &self.corr).abs().max()
    }

    pub fn corr_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim()).map(|i| self.corr.row(i).iter().copied().collect()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationEstimate {
    pub model: CopulaModel,
    /// Rows entering the covariance (after pre-averaging).
    pub rows_used: usize,
    pub warnings: Vec<String>,
}

/// Rolling mean over `window` consecutive rows; `T − window + 1` rows out.
pub fn preaverage(rows: &[Vec<f64>], window: usize) -> Vec<Vec<f64>> {
    if window <= 1 || rows.len() < window {
        return rows.to_vec();
    }
    rows.windows(window)
        .map(|w| (0..w[0].len()).map(|j| w.iter().map(|r| r[j]).sum::<f64>() / window as f64).collect())
        .collect()
}

/// Sample correlation of `dy` rows (T × N), optionally pre-averaged with a
/// window of three epochs first.
pub fn estimate_correlation(dy: &[Vec<f64>], preaverage_rows: bool) -> Result<CorrelationEstimate, RiskError> {
    let n = dy.first().map_or(0, Vec::len);
    if n == 0 || dy.iter().any(|r| r.len() != n) {
        return Err(RiskError::InvalidInput("dy rows must be nonempty and of equal length".into()));
    }
    let rows = if preaverage_rows { preaverage(dy, 3) } else { dy.to_vec() };
    let t = rows.len();
    if t < 2 {
        return Err(RiskError::InvalidInput("correlation needs at least 2 rows".into()));
    }
    let mut warnings = Vec::new();
    if t <= n {
        warnings.push(format!("{t} rows for {n} variables; the window should exceed the variable count"));
    }
    let mean: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / t as f64).collect();
    let mut cov = DMatrix::<f64>::zeros(n, n);
    for r in &rows {
        for i in 0..n {
            let di = r[i] - mean[i];
            for j in 0..=i {
                cov[(i, j)] += di * (r[j] - mean[j]);
            }
        }
    }
    for i in 0..n {
        if !(cov[(i, i)] > 0.0) {
            return Err(RiskError::Degenerate(format!("variable {i} has zero variance")));
        }
    }
    let mut corr = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..i {
            let r = cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt();
            corr[(i, j)] = r;
            corr[(j, i)] = r;
        }
    }
    Ok(CorrelationEstimate { model: CopulaModel::from_correlation(corr)?, rows_used: t, warnings })
}

fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

fn check_dim(model: &CopulaModel, n: usize) -> Result<(), RiskError> {
    if n != model.dim() {
        return Err(RiskError::InvalidInput(format!("vector of length {n} for a {}-variable model", model.dim())));
    }
    Ok(())
}

/// `A_eff = L dt + ½ ln g + (N/2) ln(2π dt)` with `L = dy·g_{ij}·dy / 2dt²`.
pub fn effective_action(dy: &[f64], model: &CopulaModel, dt: f64) -> Result<f64, RiskError> {
    check_dim(model, dy.len())?;
    if !(dt > 0.0) {
        return Err(RiskError::InvalidInput("dt must be positive".into()));
    }
    let v = DVector::from_column_slice(dy);
    let l = quad(&model.metric, &v) / (2.0 * dt * dt);
    let n = dy.len() as f64;
    Ok(l * dt + 0.5 * model.det.ln() + 0.5 * n * (2.0 * PI * dt).ln())
}

/// `C(dx) = g^{-1/2} exp(−½ dy·(g_{ij} − I)·dy)` with `dy` from each marginal.
pub fn copula_density(dx: &[f64], marginals: &[MarginalModel], model: &CopulaModel) -> Result<f64, RiskError> {
    check_dim(model, dx.len())?;
    check_dim(model, marginals.len())?;
    let dy: Vec<f64> = dx.iter().zip(marginals).map(|(x, m)| to_gaussian(m, *x)).collect();
    let v = DVector::from_column_slice(&dy);
    let n = model.dim();
    let k = &model.metric - DMatrix::<f64>::identity(n, n);
    Ok(model.det.powf(-0.5) * (-0.5 * quad(&k, &v)).exp())
}

/// Joint density: copula times the product of marginal densities.
pub fn joint_density(dx: &[f64], marginals: &[MarginalModel], model: &CopulaModel) -> Result<f64, RiskError> {
    let c = copula_density(dx, marginals, model)?;
    Ok(c * dx.iter().zip(marginals).map(|(x, m)| marginal_pdf(m, *x)).product::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub dz: Vec<f64>,
    pub dy: Vec<f64>,
    pub dx: Vec<f64>,
    /// Some `dy` exceeded the inverse-transform range and was clamped.
    pub saturated: bool,
}

/// `n` events `dz ~ N(0, I)`, `dy = C† dz`, `dx` by inverse transform.
/// Chunk `k` of [`EVENT_CHUNK`] events uses RNG stream `k` of `seed`.
pub fn sample_events(
    model: &CopulaModel,
    marginals: &[MarginalModel],
    n: usize,
    seed: u64,
) -> Result<Vec<Event>, RiskError> {
    check_dim(model, marginals.len())?;
    let d = model.dim();
    let chunks = n.div_ceil(EVENT_CHUNK);
    let out: Vec<Vec<Event>> = (0..chunks)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(seed, k as u64);
            let len = EVENT_CHUNK.min(n - k * EVENT_CHUNK);
            (0..len)
                .map(|_| {
                    let dz: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let dy: Vec<f64> = (0..d).map(|i| (0..=i).map(|j| model.chol[(i, j)] * dz[j]).sum()).collect();
                    let mut saturated = false;
                    let dx = dy
                        .iter()
                        .zip(marginals)
                        .map(|(y, m)| {
                            let t = from_gaussian_flagged(m, *y);
                            saturated |= t.saturated;
                            t.value
                        })
                        .collect();
                    Event { dz, dy, dx, saturated }
                })
                .collect()
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

/// Population covariance of the columns of `rows`.
pub fn sample_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.first().map_or(0, Vec::len);
    let t = rows.len() as f64;
    let mean: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / t).collect();
    DMatrix::from_fn(n, n, |i, j| rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / t)
}
