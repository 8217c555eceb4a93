//! Portfolio returns over sampled events, exponential fits, and Q / VaR / ETL.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::copula::Event;
use super::marginal::one_sided_widths;
use super::RiskError;

/// One market held in contracts. `nc` may be fractional when optimized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Position {
    /// Contracts now (`> 0` long, `< 0` short).
    pub nc: f64,
    /// Contracts held before this epoch; defaults to `nc` (no trade).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nc_prev: Option<f64>,
    /// Current price `p_{t'}`.
    pub price: f64,
    /// Entry price `p_@`.
    pub price_at: f64,
}

impl Position {
    fn prev(&self) -> f64 {
        self.nc_prev.unwrap_or(self.nc)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum PortfolioSpec {
    /// `dM = Σ_j (a_j dx^j + b_j)`
    Direct { a: Vec<f64>, b: Vec<f64> },
    /// `dM = (K_t − K_{t'}) / K_{t'}` over contract positions.
    Positions {
        markets: Vec<Position>,
        /// Cash available for investment `Y`.
        y_cash: f64,
        /// Slippage and commissions per contract changed.
        #[serde(default)]
        sl_rate: f64,
    },
}

impl PortfolioSpec {
    pub fn dim(&self) -> usize {
        match self {
            PortfolioSpec::Direct { a, .. } => a.len(),
            PortfolioSpec::Positions { markets, .. } => markets.len(),
        }
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        match self {
            PortfolioSpec::Direct { a, b } => {
                if a.len() != b.len() || a.is_empty() {
                    return Err(RiskError::InvalidInput("direct portfolio needs equal-length nonempty a and b".into()));
                }
            }
            PortfolioSpec::Positions { markets, y_cash, sl_rate } => {
                if markets.is_empty() {
                    return Err(RiskError::InvalidInput("position portfolio needs at least one market".into()));
                }
                if !(*sl_rate >= 0.0) || !y_cash.is_finite() {
                    return Err(RiskError::InvalidInput("sl_rate must be nonnegative and y_cash finite".into()));
                }
                if markets.iter().any(|p| !(p.price > 0.0) || !p.price_at.is_finite() || !p.nc.is_finite()) {
                    return Err(RiskError::InvalidInput("positions need positive prices and finite contracts".into()));
                }
                if self.capital_before() == 0.0 {
                    return Err(RiskError::InvalidInput("K_{t'} is zero; returns are undefined".into()));
                }
            }
        }
        Ok(())
    }

    /// `K_{t'} = Y + Σ NC_{t'} (p_{t'} − p_@)`
    fn capital_before(&self) -> f64 {
        match self {
            PortfolioSpec::Direct { .. } => 1.0,
            PortfolioSpec::Positions { markets, y_cash, .. } => {
                y_cash + markets.iter().map(|p| p.prev() * (p.price - p.price_at)).sum::<f64>()
            }
        }
    }

    /// Exposure of variable `i`: `a_i` or `nc_i`.
    pub fn exposure(&self, i: usize) -> f64 {
        match self {
            PortfolioSpec::Direct { a, .. } => a[i],
            PortfolioSpec::Positions { markets, .. } => markets[i].nc,
        }
    }

    pub fn set_exposure(&mut self, i: usize, v: f64) {
        match self {
            PortfolioSpec::Direct { a, .. } => a[i] = v,
            PortfolioSpec::Positions { markets, .. } => markets[i].nc = v,
        }
    }
}

/// Return `dM` for one vector of market moves `dx`.
///
/// Position form: `p_t = p_{t'}(1 + dx)`, profit `NC (p − p_@)` so shorts gain
/// when prices fall, and slippage `sl_rate |NC_t − NC_{t'}|` is charged as a cost.
pub fn portfolio_return(spec: &PortfolioSpec, dx: &[f64]) -> Result<f64, RiskError> {
    if dx.len() != spec.dim() {
        return Err(RiskError::InvalidInput(format!("{} moves for {} variables", dx.len(), spec.dim())));
    }
    match spec {
        PortfolioSpec::Direct { a, b } => Ok(a.iter().zip(b).zip(dx).map(|((a, b), x)| a * x + b).sum()),
        PortfolioSpec::Positions { markets, y_cash, sl_rate } => {
            let before = spec.capital_before();
            if before == 0.0 {
                return Err(RiskError::InvalidInput("K_{t'} is zero; returns are undefined".into()));
            }
            let after = y_cash
                + markets
                    .iter()
                    .zip(dx)
                    .map(|(p, x)| {
                        let price = p.price * (1.0 + x);
                        p.nc * (price - p.price_at) - sl_rate * (p.nc - p.prev()).abs()
                    })
                    .sum::<f64>();
            Ok((after - before) / before)
        }
    }
}

pub fn portfolio_returns(spec: &PortfolioSpec, events: &[Event]) -> Result<Vec<f64>, RiskError> {
    spec.validate()?;
    events.par_iter().map(|e| portfolio_return(spec, &e.dx)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binning {
    Count(usize),
    Width(f64),
}

impl Default for Binning {
    fn default() -> Self {
        Binning::Count(100)
    }
}

/// Histogram of `dM` with a two-tailed exponential fit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PortfolioDistribution {
    /// `(center, count)`
    pub bins: Vec<(f64, usize)>,
    pub n_events: usize,
    /// `X` with `2X² = ⟨dM²⟩ − ⟨dM⟩²`
    pub x_width: f64,
    /// `m_M = ⟨dM⟩`
    pub m_m: f64,
    pub x_minus: Option<f64>,
    pub x_plus: Option<f64>,
    #[serde(skip)]
    returns: Vec<f64>,
}

/// Bin `returns` and fit `m_M`, `X` (and one-sided widths) from the raw values.
pub fn build_portfolio_distribution(returns: Vec<f64>, binning: &Binning) -> Result<PortfolioDistribution, RiskError> {
    let (m_m, x_width) = exponential_fit(&returns)?;
    let (x_minus, x_plus) = one_sided_widths(&returns, m_m).unzip();
    let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let count = match binning {
        Binning::Count(n) if *n > 0 => *n,
        Binning::Width(w) if *w > 0.0 => (((hi - lo) / w).ceil() as usize).max(1),
        _ => return Err(RiskError::InvalidInput("binning needs a positive count or width".into())),
    };
    let width = (hi - lo) / count as f64;
    let mut counts = vec![0usize; count];
    for r in &returns {
        let k = (((r - lo) / width) as usize).min(count - 1);
        counts[k] += 1;
    }
    let bins = counts.into_iter().enumerate().map(|(k, c)| (lo + (k as f64 + 0.5) * width, c)).collect();
    Ok(PortfolioDistribution { bins, n_events: returns.len(), x_width, m_m, x_minus, x_plus, returns })
}

/// `(m_M, X)`; fails on fewer than two events or zero spread.
pub fn exponential_fit(returns: &[f64]) -> Result<(f64, f64), RiskError> {
    if returns.len() < 2 {
        return Err(RiskError::Degenerate("portfolio distribution needs at least two events".into()));
    }
    let n = returns.len() as f64;
    let m = returns.iter().sum::<f64>() / n;
    let v = returns.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n;
    if !(v > 0.0) {
        return Err(RiskError::Degenerate("all portfolio returns are equal; X is zero".into()));
    }
    Ok((m, (v / 2.0).sqrt()))
}

impl PortfolioDistribution {
    pub fn returns(&self) -> &[f64] {
        &self.returns
    }

    pub fn write_bins_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "center,count")?;
        for (c, n) in &self.bins {
            writeln!(w, "{c},{n}")?;
        }
        Ok(())
    }
}

/// `P(dM < −var_level)` under the fitted exponential. Above the mean this is
/// `½ e^{−|−var_level − m_M|/X}`; when the threshold is at or above `m_M` the
/// full exponential CDF is used. One-sided widths are used when supplied.
pub fn q_closed_form(m_m: f64, x_minus: f64, x_plus: f64, var_level: f64) -> f64 {
    let t = -var_level;
    if t < m_m {
        0.5 * (-(m_m - t) / x_minus).exp()
    } else {
        1.0 - 0.5 * (-(t - m_m) / x_plus).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RiskReport {
    /// Model probability of a loss beyond `var_level` (the closed form).
    pub q: f64,
    pub var_level: f64,
    /// Mean `dM` over the empirical tail; `None` when the tail is empty.
    pub etl: Option<f64>,
    pub q_closed_form: f64,
    pub q_empirical: f64,
    pub tail_events: usize,
    pub m_m: f64,
    pub x_width: f64,
}

/// Loss threshold is `−var_level`.
pub fn risk_report(dist: &PortfolioDistribution, var_level: f64, asymmetric: bool) -> Result<RiskReport, RiskError> {
    if !(var_level >= 0.0 && var_level.is_finite()) {
        return Err(RiskError::InvalidInput("var_level must be nonnegative".into()));
    }
    let (xm, xp) = match (asymmetric, dist.x_minus, dist.x_plus) {
        (true, Some(a), Some(b)) => (a, b),
        _ => (dist.x_width, dist.x_width),
    };
    let qc = q_closed_form(dist.m_m, xm, xp, var_level);
    let tail: Vec<f64> = dist.returns.iter().copied().filter(|r| *r < -var_level).collect();
    let qe = tail.len() as f64 / dist.n_events as f64;
    let etl = (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64);
    Ok(RiskReport {
        q: qc,
        var_level,
        etl,
        q_closed_form: qc,
        q_empirical: qe,
        tail_events: tail.len(),
        m_m: dist.m_m,
        x_width: dist.x_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn one_market(nc: f64) -> PortfolioSpec {
        PortfolioSpec::Positions {
            markets: vec![Position { nc, nc_prev: None, price: 100.0, price_at: 100.0 }],
            y_cash: 1000.0,
            sl_rate: 0.0,
        }
    }

    #[test]
    fn return_examples() {
        let direct = PortfolioSpec::Direct { a: vec![0.0, 0.0], b: vec![0.25, -0.5] };
        assert_eq!(portfolio_return(&direct, &[3.0, 4.0]).unwrap(), -0.25);
        assert!((portfolio_return(&one_market(1.0), &[0.01]).unwrap() - 0.001).abs() < 1e-15);
        assert!((portfolio_return(&one_market(-1.0), &[0.01]).unwrap() + 0.001).abs() < 1e-15);
        let mut traded = one_market(3.0);
        if let PortfolioSpec::Positions { markets, sl_rate, .. } = &mut traded {
            markets[0].nc_prev = Some(1.0);
            *sl_rate = 0.5;
        }
        // K_t = 1000 + 3 * 1 - 0.5 * 2
        assert!((portfolio_return(&traded, &[0.01]).unwrap() - 0.002).abs() < 1e-15);
        let broke = PortfolioSpec::Positions {
            markets: vec![Position { nc: 1.0, nc_prev: None, price: 100.0, price_at: 100.0 }],
            y_cash: 0.0,
            sl_rate: 0.0,
        };
        assert!(portfolio_return(&broke, &[0.01]).is_err());
    }

    #[test]
    fn distribution_contract() {
        assert!(matches!(build_portfolio_distribution(vec![0.1], &Binning::Count(10)), Err(RiskError::Degenerate(_))));
        assert!(build_portfolio_distribution(vec![0.1; 5], &Binning::Count(10)).is_err());
        let xs: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.37).sin() * 0.01).collect();
        let d = build_portfolio_distribution(xs.clone(), &Binning::Count(20)).unwrap();
        assert_eq!(d.bins.iter().map(|b| b.1).sum::<usize>(), 1000);
        let c = 0.3;
        let shifted = build_portfolio_distribution(xs.iter().map(|x| x + c).collect(), &Binning::Width(0.001)).unwrap();
        assert!((shifted.m_m - d.m_m - c).abs() < 1e-12);
        assert!((shifted.x_width - d.x_width).abs() < 1e-12);
    }

    #[test]
    fn q_examples() {
        let x = 0.05 / 50f64.ln();
        assert!((q_closed_form(0.0, x, x, 0.05) - 0.01).abs() < 1e-16);
        assert!(q_closed_form(0.0, x, x, 1e3) < 1e-300);
        // Threshold above the mean: full CDF.
        assert!((q_closed_form(-0.1, 0.01, 0.01, 0.1) - 0.5).abs() < 1e-15);
        assert!(q_closed_form(-0.2, 0.01, 0.01, 0.1) > 0.99);
    }

    #[test]
    fn symmetric_empirical_q_at_zero() {
        let mut rng = crate::rng::seeded(8);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>() - 0.5).collect();
        let d = build_portfolio_distribution(xs, &Binning::Count(50)).unwrap();
        let r = risk_report(&d, 0.0, false).unwrap();
        assert!((r.q_empirical - 0.5).abs() < 0.01);
        assert!(r.etl.unwrap() < 0.0);
        let empty = risk_report(&d, 10.0, false).unwrap();
        assert_eq!((empty.q_empirical, empty.etl), (0.0, None));
    }
}
