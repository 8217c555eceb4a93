//! ASA search over exposures subject to a soft Q constraint.

use serde::{Deserialize, Serialize};

use super::copula::Event;
use super::portfolio::{
    build_portfolio_distribution, exponential_fit, portfolio_return, q_closed_form, risk_report, Binning,
    PortfolioSpec, RiskReport,
};
use super::RiskError;
use crate::asa::{self, AnnealSchedule, Bounds, TraceRecord};

/// Largest `|Q − q_target|` reported as satisfying the constraint.
pub const Q_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Minimize `−⟨dM⟩`.
    #[default]
    MaxMeanReturn,
    /// Constraint only.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeExposure {
    /// Variable index: `a_j` in direct form, `nc_j` in position form.
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureProblem {
    pub free: Vec<FreeExposure>,
    pub var_level: f64,
    #[serde(default = "default_q_target")]
    pub q_target: f64,
    /// Weight of `|Q − q_target|` in the cost.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub objective: Objective,
}

fn default_q_target() -> f64 {
    0.01
}

fn default_lambda() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExposureOutcome {
    pub spec: PortfolioSpec,
    pub values: Vec<f64>,
    pub report: RiskReport,
    pub cost: f64,
    pub evals: usize,
    pub budget_exhausted: bool,
    /// `|Q − q_target|` exceeds [`Q_TOLERANCE`] at the best point.
    pub constraint_infeasible: bool,
    /// Pairs of free exposures along which the cost is flat at the optimum.
    pub ties: Vec<(usize, usize)>,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

struct CostModel<'a> {
    template: &'a PortfolioSpec,
    problem: &'a ExposureProblem,
    events: &'a [Event],
}

impl CostModel<'_> {
    fn spec(&self, x: &[f64]) -> PortfolioSpec {
        let mut s = self.template.clone();
        for (f, v) in self.problem.free.iter().zip(x) {
            s.set_exposure(f.index, *v);
        }
        s
    }

    /// `(cost, Q)`; degenerate portfolios cost `+∞`.
    fn eval(&self, x: &[f64]) -> (f64, f64) {
        let spec = self.spec(x);
        let returns: Result<Vec<f64>, _> = self.events.iter().map(|e| portfolio_return(&spec, &e.dx)).collect();
        let Ok(returns) = returns else { return (f64::INFINITY, f64::NAN) };
        let Ok((m, x_width)) = exponential_fit(&returns) else { return (f64::INFINITY, f64::NAN) };
        let q = q_closed_form(m, x_width, x_width, self.problem.var_level);
        let obj = match self.problem.objective {
            Objective::MaxMeanReturn => -m,
            Objective::None => 0.0,
        };
        (obj + self.problem.lambda * (q - self.problem.q_target).abs(), q)
    }
}

/// Minimize the objective plus `λ|Q − q_target|` over the free exposures,
/// holding `events` fixed.
pub fn optimize_exposures(
    template: &PortfolioSpec,
    problem: &ExposureProblem,
    events: &[Event],
    schedule: &AnnealSchedule,
    seed: u64,
) -> Result<ExposureOutcome, RiskError> {
    template.validate()?;
    if problem.free.is_empty() {
        return Err(RiskError::InvalidInput("exposure optimization needs at least one free exposure".into()));
    }
    if problem.free.iter().any(|f| f.index >= template.dim()) {
        return Err(RiskError::InvalidInput("free exposure index out of range".into()));
    }
    if events.is_empty() {
        return Err(RiskError::InvalidInput("exposure optimization needs events".into()));
    }
    if !(0.0..=1.0).contains(&problem.q_target) || !(problem.lambda > 0.0) {
        return Err(RiskError::InvalidInput("q_target must lie in [0, 1] and lambda be positive".into()));
    }
    let bounds = Bounds::new(problem.free.iter().map(|f| (f.lo, f.hi)).collect())?;
    let model = CostModel { template, problem, events };
    let cost = |x: &[f64]| model.eval(x).0;
    let out = asa::optimize(&cost, &bounds, schedule, seed)?;

    let spec = model.spec(&out.best.x);
    let returns = events.iter().map(|e| portfolio_return(&spec, &e.dx)).collect::<Result<Vec<_>, _>>()?;
    let dist = build_portfolio_distribution(returns, &Binning::default())?;
    let report = risk_report(&dist, problem.var_level, false)?;
    let ties = detect_ties(&model, &bounds, &out.best.x, out.best.cost);
    Ok(ExposureOutcome {
        constraint_infeasible: (report.q_closed_form - problem.q_target).abs() > Q_TOLERANCE,
        spec,
        values: out.best.x,
        report,
        cost: out.best.cost,
        evals: out.evals,
        budget_exhausted: out.budget_exhausted,
        ties,
        trace: out.trace,
    })
}

/// Pairs `(i, j)` where moving exposure from `i` to `j` (either way) leaves the
/// cost unchanged to within rounding.
fn detect_ties(model: &CostModel<'_>, bounds: &Bounds, x: &[f64], cost: f64) -> Vec<(usize, usize)> {
    let tol = 1e-9 * cost.abs().max(1e-12);
    let mut ties = Vec::new();
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let delta = 1e-3 * bounds.width(i).min(bounds.width(j));
            let flat = [1.0, -1.0].iter().all(|s| {
                let mut y = x.to_vec();
                y[i] += s * delta;
                y[j] -= s * delta;
                if !bounds.contains(&y) {
                    return false;
                }
                (model.eval(&y).0 - cost).abs() <= tol
            });
            if flat {
                ties.push((i, j));
            }
        }
    }
    ties
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::copula::{sample_events, CopulaModel};
    use crate::risk::marginal::MarginalModel;
    use nalgebra::DMatrix;

    #[test]
    fn identical_markets_tie() {
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let model = CopulaModel::from_correlation(corr).unwrap();
        let marg = vec![MarginalModel::new(0.001, 0.01).unwrap(); 2];
        let mut events = sample_events(&model, &marg, 4000, 1).unwrap();
        for e in &mut events {
            e.dx[1] = e.dx[0];
        }
        let template = PortfolioSpec::Direct { a: vec![1.0, 1.0], b: vec![0.0, 0.0] };
        let problem = ExposureProblem {
            free: vec![FreeExposure { index: 0, lo: 0.0, hi: 4.0 }, FreeExposure { index: 1, lo: 0.0, hi: 4.0 }],
            var_level: 0.05,
            q_target: 0.01,
            lambda: 10.0,
            objective: Objective::MaxMeanReturn,
        };
        let sched = AnnealSchedule::uniform(2, 1.0, 1.0, 4000);
        let out = optimize_exposures(&template, &problem, &events, &sched, 2).unwrap();
        assert_eq!(out.ties, vec![(0, 1)]);
    }

    #[test]
    fn vacuous_constraint_follows_objective() {
        let model = CopulaModel::identity(1);
        let marg = vec![MarginalModel::new(0.0, 0.01).unwrap()];
        let events = sample_events(&model, &marg, 2000, 4).unwrap();
        let template = PortfolioSpec::Direct { a: vec![1.0], b: vec![0.0] };
        let problem = ExposureProblem {
            free: vec![FreeExposure { index: 0, lo: 0.1, hi: 2.0 }],
            var_level: 0.0,
            q_target: 0.5,
            lambda: 1.0,
            objective: Objective::MaxMeanReturn,
        };
        let sched = AnnealSchedule::uniform(1, 1.0, 1.0, 500);
        let out = optimize_exposures(&template, &problem, &events, &sched, 3).unwrap();
        let m = events.iter().map(|e| e.dx[0]).sum::<f64>() / events.len() as f64;
        // With b = 0, m_M / X does not depend on a, so the penalty is constant.
        if m > 0.0 {
            assert!(out.values[0] > 1.5, "{:?}", out.values);
        } else {
            assert!(out.values[0] < 0.6, "{:?}", out.values);
        }
    }
}
