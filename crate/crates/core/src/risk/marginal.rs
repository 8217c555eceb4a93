//! Two-tailed exponential marginals and their Gaussian copula transform.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};

use super::special::{erf, erf_inv, erfc, erfc_inv};
use super::RiskError;

/// Largest `|dy|` the inverse transform resolves; `erfc(|dy|/√2)` underflows beyond it.
pub const DY_SATURATION: f64 = 37.5;

/// `p(dx) = e^{-|dx-m|/χ} / 2χ`, optionally with separate widths below and
/// above `m` (each side carrying half the mass).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalModel {
    pub m: f64,
    pub chi: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi_minus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chi_plus: Option<f64>,
}

/// A transformed value and whether it hit the saturation clamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transformed {
    pub value: f64,
    pub saturated: bool,
}

impl MarginalModel {
    pub fn new(m: f64, chi: f64) -> Result<Self, RiskError> {
        let model = Self { m, chi, chi_minus: None, chi_plus: None };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), RiskError> {
        if !self.m.is_finite() || !(self.chi > 0.0 && self.chi.is_finite()) {
            return Err(RiskError::InvalidModel(format!(
                "marginal needs finite m and χ > 0 (m={}, χ={})",
                self.m, self.chi
            )));
        }
        match (self.chi_minus, self.chi_plus) {
            (None, None) => Ok(()),
            (Some(a), Some(b)) if a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite() => Ok(()),
            _ => Err(RiskError::InvalidModel("asymmetric widths must both be present and positive".into())),
        }
    }

    /// Width on the side of `m` given by the sign of `d`.
    pub fn width(&self, d: f64) -> f64 {
        if d < 0.0 {
            self.chi_minus.unwrap_or(self.chi)
        } else {
            self.chi_plus.unwrap_or(self.chi)
        }
    }

    pub fn is_asymmetric(&self) -> bool {
        self.chi_minus.is_some()
    }
}

fn trailing(series: &[f64], window: Option<usize>) -> Result<&[f64], RiskError> {
    let w = window.unwrap_or(series.len());
    if w < 2 {
        return Err(RiskError::InvalidInput("marginal window must be at least 2".into()));
    }
    if series.len() < w {
        return Err(RiskError::InvalidInput(format!("series of {} values is shorter than window {w}", series.len())));
    }
    Ok(&series[series.len() - w..])
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v)
}

/// `m = ⟨dx⟩`, `2χ² = ⟨dx²⟩ − ⟨dx⟩²` over the trailing `window` values
/// (the whole series when `None`).
pub fn fit_marginal(series: &[f64], window: Option<usize>) -> Result<MarginalModel, RiskError> {
    let xs = trailing(series, window)?;
    let (m, v) = mean_and_variance(xs);
    if !(v > 0.0) {
        return Err(RiskError::Degenerate("marginal series has zero variance".into()));
    }
    MarginalModel::new(m, (v / 2.0).sqrt())
}

/// As [`fit_marginal`], plus one-sided widths `χ± = √(⟨(dx − m)²⟩_± / 2)`.
pub fn fit_marginal_asymmetric(series: &[f64], window: Option<usize>) -> Result<MarginalModel, RiskError> {
    let mut model = fit_marginal(series, window)?;
    let xs = trailing(series, window)?;
    let (lo, hi) = one_sided_widths(xs, model.m)
        .ok_or_else(|| RiskError::Degenerate("asymmetric fit needs values on both sides of the mean".into()))?;
    model.chi_minus = Some(lo);
    model.chi_plus = Some(hi);
    Ok(model)
}

pub(crate) fn one_sided_widths(xs: &[f64], m: f64) -> Option<(f64, f64)> {
    let side = |below: bool| {
        let d: Vec<f64> = xs.iter().map(|x| x - m).filter(|d| if below { *d < 0.0 } else { *d > 0.0 }).collect();
        if d.is_empty() {
            None
        } else {
            Some((d.iter().map(|d| d * d).sum::<f64>() / d.len() as f64 / 2.0).sqrt())
        }
    };
    Some((side(true)?, side(false)?))
}

pub fn marginal_pdf(model: &MarginalModel, dx: f64) -> f64 {
    let d = dx - model.m;
    let w = model.width(d);
    (-d.abs() / w).exp() / (2.0 * w)
}

pub fn marginal_cdf(model: &MarginalModel, dx: f64) -> f64 {
    let d = dx - model.m;
    if d == 0.0 {
        return 0.5;
    }
    let tail = 0.5 * (-d.abs() / model.width(d)).exp();
    if d < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// `dy = √2 sgn(dx − m) erf⁻¹(1 − e^{−|dx−m|/χ})`.
pub fn to_gaussian(model: &MarginalModel, dx: f64) -> f64 {
    to_gaussian_flagged(model, dx).value
}

pub fn to_gaussian_flagged(model: &MarginalModel, dx: f64) -> Transformed {
    let d = dx - model.m;
    if d == 0.0 {
        return Transformed { value: 0.0, saturated: false };
    }
    let z = d.abs() / model.width(d);
    let (y, saturated) = if z < std::f64::consts::LN_2 {
        (erf_inv(-(-z).exp_m1()), false)
    } else {
        let q = (-z).exp();
        if q > 0.0 {
            (erfc_inv(q), false)
        } else {
            (DY_SATURATION / SQRT_2, true)
        }
    };
    Transformed { value: d.signum() * SQRT_2 * y, saturated }
}

/// `dx = m − sgn(dy) χ ln[1 − erf(|dy|/√2)]`.
pub fn from_gaussian(model: &MarginalModel, dy: f64) -> f64 {
    from_gaussian_flagged(model, dy).value
}

pub fn from_gaussian_flagged(model: &MarginalModel, dy: f64) -> Transformed {
    if dy == 0.0 {
        return Transformed { value: model.m, saturated: false };
    }
    let saturated = dy.abs() > DY_SATURATION;
    let u = dy.abs().min(DY_SATURATION) / SQRT_2;
    let log_tail = if u < 0.5 { (-erf(u)).ln_1p() } else { erfc(u).ln() };
    Transformed { value: model.m - dy.signum() * model.width(dy) * log_tail, saturated }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::special::normal_cdf;

    #[test]
    fn fit_examples() {
        let f = fit_marginal(&[-1.0, 0.0, 1.0], None).unwrap();
        assert_eq!(f.m, 0.0);
        assert!((f.chi - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let shifted = fit_marginal(&[9.0, 10.0, 11.0], None).unwrap();
        assert!((shifted.m - 10.0).abs() < 1e-12 && (shifted.chi - f.chi).abs() < 1e-12);
        assert!(matches!(fit_marginal(&[2.0, 2.0, 2.0], None), Err(RiskError::Degenerate(_))));
        assert!(fit_marginal(&[1.0], None).is_err());
        let w = fit_marginal(&[100.0, -1.0, 0.0, 1.0], Some(3)).unwrap();
        assert_eq!(w, f);
    }

    #[test]
    fn cdf_examples() {
        let m = MarginalModel::new(0.0, 1.0).unwrap();
        assert_eq!(marginal_cdf(&m, 0.0), 0.5);
        assert!((marginal_cdf(&m, 1.0) - 0.5 * (2.0 - (-1f64).exp())).abs() < 1e-15);
        assert!((marginal_cdf(&m, 50.0) - 1.0).abs() < 1e-15);
        assert!(marginal_cdf(&m, -50.0) < 1e-15);
    }

    #[test]
    fn transform_examples() {
        let m = MarginalModel::new(0.0, 1.0).unwrap();
        assert_eq!(to_gaussian(&m, 0.0), 0.0);
        // mpmath: sqrt(2)*erfinv(1 - e^-1)
        assert!((to_gaussian(&m, 1.0) - 0.900_452_596_637_790_3).abs() < 1e-14);
        assert_eq!(to_gaussian(&m, -1.0), -to_gaussian(&m, 1.0));
        let sat = from_gaussian_flagged(&m, 60.0);
        assert!(sat.saturated && sat.value.is_finite());
        assert!(!from_gaussian_flagged(&m, 5.0).saturated);
    }

    #[test]
    fn copula_identity_on_asymmetric_marginal() {
        let m = MarginalModel { m: 0.1, chi: 1.0, chi_minus: Some(0.5), chi_plus: Some(2.0) };
        for i in -80..=80 {
            let dy = i as f64 / 10.0;
            let dx = from_gaussian(&m, dy);
            assert!((marginal_cdf(&m, dx) - normal_cdf(dy)).abs() < 1e-13, "{dy}");
            assert!((to_gaussian(&m, dx) - dy).abs() < 1e-9);
        }
    }

    #[test]
    fn asymmetric_fit_recovers_widths() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(4);
        let xs: Vec<f64> = (0..200_000)
            .map(|_| {
                let e = -rng.random::<f64>().ln();
                if rng.random::<bool>() {
                    e * 0.02
                } else {
                    -e * 0.01
                }
            })
            .collect();
        let f = fit_marginal_asymmetric(&xs, None).unwrap();
        // One-sided moments are taken about the mean, not the mode.
        assert!(f.chi_plus.unwrap() > f.chi_minus.unwrap());
        assert!(fit_marginal_asymmetric(&[1.0, 1.0, 2.0], None).is_ok());
    }
}
