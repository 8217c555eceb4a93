//! Mesoscopic dynamics of a single macrocolumn.
//!
//! A macrocolumn is a two-variable stochastic unit whose state is the pair of
//! excitatory and inhibitory firings `(M^E, M^I)`. The nonlinear threshold
//! factor `F^G` controls both the drift (through `tanh F^G`) and the diagonal
//! diffusion (through `sech² F^G`); the short-time conditional density is the
//! exponential of minus the Lagrangian.
//!
//! Long-ranged afferents enter only the excitatory threshold factor. When a
//! column carries a [`LongRangedParams`] block the numerator gains
//! `-a†·v†·N† - ½·A†·v†·M†` and the radicand gains `a†·N† + ½·A†·M†`
//! (unweighted by the polarization variances).

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Firing population index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pop {
    #[serde(rename = "E")]
    Excitatory,
    #[serde(rename = "I")]
    Inhibitory,
}

impl Pop {
    pub const ALL: [Pop; 2] = [Pop::Excitatory, Pop::Inhibitory];

    pub fn index(self) -> usize {
        match self {
            Pop::Excitatory => 0,
            Pop::Inhibitory => 1,
        }
    }
}

impl fmt::Display for Pop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pop::Excitatory => write!(f, "E"),
            Pop::Inhibitory => write!(f, "I"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmniError {
    #[error("invalid column parameters: {0}")]
    InvalidParams(String),
    #[error("threshold radicand for population {pop} is {radicand:e} (must be positive)")]
    ParameterDomain { pop: Pop, radicand: f64 },
    #[error("centering infeasible for population {pop}: {reason}")]
    Infeasible { pop: Pop, reason: String },
}

/// Excitatory/inhibitory firing pair of one macrocolumn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiringState {
    pub m_e: f64,
    pub m_i: f64,
}

impl FiringState {
    pub const ORIGIN: FiringState = FiringState { m_e: 0.0, m_i: 0.0 };

    pub fn new(m_e: f64, m_i: f64) -> Self {
        Self { m_e, m_i }
    }

    pub fn from_array(m: [f64; 2]) -> Self {
        Self { m_e: m[0], m_i: m[1] }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.m_e, self.m_i]
    }

    pub fn get(self, pop: Pop) -> f64 {
        self.to_array()[pop.index()]
    }

    pub fn distance(self, other: FiringState) -> f64 {
        (self.m_e - other.m_e).hypot(self.m_i - other.m_i)
    }
}

/// Afferent long-ranged excitatory fiber block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongRangedParams {
    /// Long-ranged fiber count scale `N†`.
    pub n_dagger: f64,
    /// `A†`
    pub efficacy: f64,
    /// `B†`
    pub background: f64,
    /// Mean polarization per long-ranged firing.
    pub pol_mean: f64,
    /// Afferent long-ranged firing `M†`, supplied each epoch by the population layer.
    #[serde(default)]
    pub m_dagger: f64,
}

impl LongRangedParams {
    /// `a† = ½A† + B†`
    pub fn effective_efficacy(&self) -> f64 {
        0.5 * self.efficacy + self.background
    }
}

/// Synaptic and threshold parameters of one macrocolumn.
///
/// Matrices are indexed `[G][G']`: row is the efferent population, column the
/// afferent one. Inputs are taken as already scaled to minicolumnar firings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnParams {
    pub n_e: f64,
    pub n_i: f64,
    pub tau: f64,
    /// Threshold polarization `V^G` (mV).
    pub threshold: [f64; 2],
    /// Synaptic efficacy `A^G_{G'}`.
    pub efficacy: [[f64; 2]; 2],
    /// Background efficacy `B^G_{G'}`.
    pub background: [[f64; 2]; 2],
    /// Mean polarization contribution `v^G_{G'}` (mV).
    pub pol_mean: [[f64; 2]; 2],
    /// Polarization spread `φ^G_{G'}` (mV).
    pub pol_spread: [[f64; 2]; 2],
    /// Nearest-neighbor coefficients `V''_G`.
    #[serde(default)]
    pub nn_coeff: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long: Option<LongRangedParams>,
}

impl ColumnParams {
    pub fn neurons(&self) -> [f64; 2] {
        [self.n_e, self.n_i]
    }

    /// Total neurons `N = N^E + N^I`.
    pub fn total_neurons(&self) -> f64 {
        self.n_e + self.n_i
    }

    /// `a^G_{G'} = ½A^G_{G'} + B^G_{G'}`
    pub fn effective_efficacy(&self, g: usize, gp: usize) -> f64 {
        0.5 * self.efficacy[g][gp] + self.background[g][gp]
    }

    pub fn validate(&self) -> Result<(), SmniError> {
        let bad = |msg: String| Err(SmniError::InvalidParams(msg));
        if !(self.n_e > 0.0 && self.n_i > 0.0) {
            return bad(format!("neuron counts must be positive (n_e={}, n_i={})", self.n_e, self.n_i));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for g in 0..2 {
            for gp in 0..2 {
                if !(self.pol_spread[g][gp] > 0.0) {
                    return bad(format!("pol_spread[{g}][{gp}] must be positive"));
                }
                if self.efficacy[g][gp] < 0.0 || self.background[g][gp] < 0.0 {
                    return bad(format!("efficacies [{g}][{gp}] must be nonnegative"));
                }
                if !self.pol_mean[g][gp].is_finite() {
                    return bad(format!("pol_mean[{g}][{gp}] must be finite"));
                }
            }
            if self.nn_coeff[g] < 0.0 {
                return bad(format!("nn_coeff[{g}] must be nonnegative"));
            }
            if !self.threshold[g].is_finite() {
                return bad(format!("threshold[{g}] must be finite"));
            }
        }
        if let Some(long) = &self.long {
            if long.n_dagger < 0.0 || long.efficacy < 0.0 || long.background < 0.0 {
                return bad("long-ranged magnitudes must be nonnegative".into());
            }
        }
        Ok(())
    }

    /// Whether `state` lies inside the physical firing box `|M^G| ≤ N^G`.
    pub fn contains(&self, state: FiringState) -> bool {
        state.m_e.abs() <= self.n_e && state.m_i.abs() <= self.n_i
    }

    pub fn clamp(&self, state: FiringState) -> FiringState {
        FiringState { m_e: state.m_e.clamp(-self.n_e, self.n_e), m_i: state.m_i.clamp(-self.n_i, self.n_i) }
    }
}

/// Drift, diagonal diffusion and metric at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalDynamics {
    /// `g^G`
    pub drift: [f64; 2],
    /// `g^{GG}`
    pub diffusion: [f64; 2],
    /// `g_{GG} = 1/g^{GG}`
    pub metric: [f64; 2],
    /// `g = det(g_{GG'})`
    pub det_metric: f64,
}

/// Numerator and radicand of `F^G`. The afferent term with the largest
/// `|v N|` is subtracted last so centering can drive the numerator to an
/// exact zero by adjusting that one background entry.
fn numerator_and_radicand(state: FiringState, params: &ColumnParams, g: usize) -> (f64, f64) {
    let n = params.neurons();
    let m = state.to_array();
    let dominant = dominant_afferent(params, g);
    let term = |gp: usize| {
        let a = params.effective_efficacy(g, gp);
        let v = params.pol_mean[g][gp];
        a * v * n[gp] + 0.5 * params.efficacy[g][gp] * v * m[gp]
    };
    let mut num = params.threshold[g];
    let mut rad = 0.0;
    for gp in 0..2 {
        let a = params.effective_efficacy(g, gp);
        let v = params.pol_mean[g][gp];
        let phi = params.pol_spread[g][gp];
        if gp != dominant {
            num -= term(gp);
        }
        rad += (v * v + phi * phi) * (a * n[gp] + 0.5 * params.efficacy[g][gp] * m[gp]);
    }
    if g == 0 {
        if let Some(long) = &params.long {
            let a = long.effective_efficacy();
            let half_a = 0.5 * long.efficacy;
            num -= a * long.pol_mean * long.n_dagger + half_a * long.pol_mean * long.m_dagger;
            rad += a * long.n_dagger + half_a * long.m_dagger;
        }
    }
    num -= term(dominant);
    (num, PI * rad)
}

fn dominant_afferent(params: &ColumnParams, g: usize) -> usize {
    let n = params.neurons();
    let w = |gp: usize| (params.pol_mean[g][gp] * n[gp]).abs();
    if w(1) > w(0) {
        1
    } else {
        0
    }
}

/// Threshold factors `[F^E, F^I]`.
pub fn threshold_factor(state: FiringState, params: &ColumnParams) -> Result<[f64; 2], SmniError> {
    let mut out = [0.0; 2];
    for pop in Pop::ALL {
        let g = pop.index();
        let (num, rad) = numerator_and_radicand(state, params, g);
        if !(rad > 0.0) {
            return Err(SmniError::ParameterDomain { pop, radicand: rad });
        }
        out[g] = num / rad.sqrt();
    }
    Ok(out)
}

pub fn local_dynamics(state: FiringState, params: &ColumnParams) -> Result<LocalDynamics, SmniError> {
    let f = threshold_factor(state, params)?;
    let n = params.neurons();
    let m = state.to_array();
    let mut drift = [0.0; 2];
    let mut diffusion = [0.0; 2];
    let mut metric = [0.0; 2];
    for g in 0..2 {
        drift[g] = -(m[g] + n[g] * f[g].tanh()) / params.tau;
        let sech = 1.0 / f[g].cosh();
        diffusion[g] = n[g] * sech * sech / params.tau;
        metric[g] = 1.0 / diffusion[g];
    }
    Ok(LocalDynamics { drift, diffusion, metric, det_metric: metric[0] * metric[1] })
}

/// Mesoscopic Lagrangian `L_M` for a transition at rate `rate` out of `state`.
///
/// `neighbor_gradient` holds `|∇M^G|` in lattice units (ρ = 1); the
/// nearest-neighbor potential is subtracted only when it is supplied.
pub fn lagrangian(
    state: FiringState,
    rate: [f64; 2],
    params: &ColumnParams,
    neighbor_gradient: Option<[f64; 2]>,
) -> Result<f64, SmniError> {
    let dyn_ = local_dynamics(state, params)?;
    Ok(lagrangian_with(&dyn_, rate, params, neighbor_gradient))
}

pub(crate) fn lagrangian_with(
    dyn_: &LocalDynamics,
    rate: [f64; 2],
    params: &ColumnParams,
    neighbor_gradient: Option<[f64; 2]>,
) -> f64 {
    let mut quad = 0.0;
    for g in 0..2 {
        let d = rate[g] - dyn_.drift[g];
        quad += d * d * dyn_.metric[g];
    }
    let mut l = quad / (2.0 * params.total_neurons());
    if let Some(grad) = neighbor_gradient {
        let v_nn: f64 = (0..2).map(|g| params.nn_coeff[g] * grad[g] * grad[g]).sum();
        l -= v_nn;
    }
    l
}

/// Unnormalized short-time density `(2πτ)^{-1/2} g^{1/2} exp(-NτL_M)` for the
/// transition `from → to` over one epoch.
pub fn short_time_probability(from: FiringState, to: FiringState, params: &ColumnParams) -> Result<f64, SmniError> {
    Ok((-transition_action(from, to, params, None)?).exp())
}

/// Negative log of the short-time density: `NτL_M - ½ ln g + ½ ln(2πτ)`.
pub fn transition_action(
    from: FiringState,
    to: FiringState,
    params: &ColumnParams,
    neighbor_gradient: Option<[f64; 2]>,
) -> Result<f64, SmniError> {
    let dyn_ = local_dynamics(from, params)?;
    let tau = params.tau;
    let rate = [(to.m_e - from.m_e) / tau, (to.m_i - from.m_i) / tau];
    let l = lagrangian_with(&dyn_, rate, params, neighbor_gradient);
    Ok(params.total_neurons() * tau * l - 0.5 * dyn_.det_metric.ln() + 0.5 * (2.0 * PI * tau).ln())
}

/// Background shift applied per efferent population by [`center_background`].
#[derive(Clone, Debug, PartialEq)]
pub struct Centering {
    pub params: ColumnParams,
    pub shift: [f64; 2],
}

/// Shift the background efficacies `B^G_{G'}` (one uniform additive shift per
/// row, clamped at zero) so that `F^G(target) = 0` for both populations.
pub fn center_background(params: &ColumnParams, target: FiringState) -> Result<ColumnParams, SmniError> {
    center_background_with_shift(params, target).map(|c| c.params)
}

pub fn center_background_with_shift(params: &ColumnParams, target: FiringState) -> Result<Centering, SmniError> {
    params.validate()?;
    if !params.contains(target) {
        return Err(SmniError::InvalidParams(format!(
            "centering target ({}, {}) lies outside the firing bounds",
            target.m_e, target.m_i
        )));
    }
    let mut out = params.clone();
    let mut shift = [0.0; 2];
    for pop in Pop::ALL {
        let g = pop.index();
        let s = solve_row_shift(params, target, pop)?;
        let row = polish_row(params, target, g, shifted_row(params, g, s));
        out.background[g] = row;
        let (_, rad) = numerator_and_radicand(target, &out, g);
        if !(rad > 0.0) {
            return Err(SmniError::Infeasible { pop, reason: format!("centered radicand {rad:e} is not positive") });
        }
        shift[g] = s;
    }
    Ok(Centering { params: out, shift })
}

fn shifted_row(params: &ColumnParams, g: usize, s: f64) -> [f64; 2] {
    let b = params.background[g];
    if s == 0.0 {
        return b;
    }
    [(b[0] + s).max(0.0), (b[1] + s).max(0.0)]
}

fn row_numerator(params: &ColumnParams, target: FiringState, g: usize, s: f64) -> f64 {
    let mut p = params.clone();
    p.background[g] = shifted_row(params, g, s);
    numerator_and_radicand(target, &p, g).0
}

/// Exact root of the piecewise-linear numerator in the shift.
fn solve_row_shift(params: &ColumnParams, target: FiringState, pop: Pop) -> Result<f64, SmniError> {
    let g = pop.index();
    let n = params.neurons();
    let num0 = row_numerator(params, target, g, 0.0);
    if num0 == 0.0 {
        return Ok(0.0);
    }
    // Breakpoints where an entry of the row hits the clamp.
    let b = params.background[g];
    let mut knots: Vec<f64> = vec![-b[0], -b[1]];
    knots.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // Each piece is linear with slope -Σ_{active} v N.
    let slope_on =
        |s: f64| -> f64 { (0..2).filter(|&gp| b[gp] + s > 0.0).map(|gp| -params.pol_mean[g][gp] * n[gp]).sum() };
    // (lo, hi)
    let pieces = [(f64::NEG_INFINITY, knots[0]), (knots[0], knots[1]), (knots[1], f64::INFINITY)];
    let mut candidates = Vec::new();
    for (lo, hi) in pieces {
        if !(hi > lo) {
            continue;
        }
        let probe = if lo.is_finite() && hi.is_finite() {
            0.5 * (lo + hi)
        } else if lo.is_finite() {
            lo + 1.0
        } else {
            hi - 1.0
        };
        let slope = slope_on(probe);
        if slope == 0.0 {
            continue;
        }
        let at = row_numerator(params, target, g, probe);
        let root = probe - at / slope;
        if root >= lo && root <= hi {
            candidates.push(root);
        }
    }
    // Prefer the root that moves B least.
    candidates.into_iter().min_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap()).ok_or_else(|| infeasible(pop, num0))
}

fn infeasible(pop: Pop, num0: f64) -> SmniError {
    SmniError::Infeasible {
        pop,
        reason: format!(
            "no nonnegative background shift zeroes the threshold numerator (unshifted numerator {num0:e})"
        ),
    }
}

/// Nudge the shift by a few ulps until the numerator evaluates to exactly
/// zero, so drift at the centering target vanishes exactly.
/// Nudge the shifted row by ulps until the numerator evaluates to exactly
/// zero, so the drift at the target is exactly zero. The dominant entry sets
/// the coarse value of the last subtraction; the other entry fine-tunes the
/// partial sum to match it.
fn polish_row(params: &ColumnParams, target: FiringState, g: usize, row: [f64; 2]) -> [f64; 2] {
    let eval = |r: [f64; 2]| {
        let mut p = params.clone();
        p.background[g] = r;
        numerator_and_radicand(target, &p, g).0.abs()
    };
    let k = dominant_afferent(params, g);
    let o = 1 - k;
    let mut best = (eval(row), row);
    for coarse in [0i64, 1, -1, 2, -2, 3, -3, 4, -4] {
        for fine in 0..=2048i64 {
            for sign in [1, -1] {
                if best.0 == 0.0 {
                    return best.1;
                }
                let mut cand = row;
                cand[k] = step_ulps(row[k], coarse);
                cand[o] = step_ulps(row[o], sign * fine);
                if cand[k] < 0.0 || cand[o] < 0.0 {
                    continue;
                }
                let v = eval(cand);
                if v < best.0 {
                    best = (v, cand);
                }
            }
        }
    }
    best.1
}

fn step_ulps(mut x: f64, n: i64) -> f64 {
    for _ in 0..n.unsigned_abs() {
        x = if n > 0 { next_up(x) } else { next_down(x) };
    }
    x
}

fn next_up(x: f64) -> f64 {
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// The small fixed parameter set shared by the transcription-oracle tests.
    pub(crate) fn small_params() -> ColumnParams {
        ColumnParams {
            n_e: 80.0,
            n_i: 30.0,
            tau: 1.0,
            threshold: [0.1, 0.1],
            efficacy: [[0.01; 2]; 2],
            background: [[0.005; 2]; 2],
            pol_mean: [[0.1; 2]; 2],
            pol_spread: [[0.03; 2]; 2],
            nn_coeff: [0.0; 2],
            long: None,
        }
    }

    /// Balanced short-term-memory style column with inhibitory afferents
    /// carrying negative polarization.
    pub(crate) fn stm_params() -> ColumnParams {
        ColumnParams {
            n_e: 80.0,
            n_i: 30.0,
            tau: 1.0,
            threshold: [10.0, 10.0],
            efficacy: [[1.75, 1.85], [1.35, 0.85]],
            background: [[0.25, 0.15], [0.15, 0.25]],
            pol_mean: [[0.1, -0.1], [0.1, -0.1]],
            pol_spread: [[0.03f64.sqrt(); 2]; 2],
            nn_coeff: [0.0; 2],
            long: None,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    // Values from an independent direct transcription (Python, float64).
    const F_SMALL: [f64; 2] = [-0.087243068088179246, -0.087243068088179246];

    #[test]
    fn threshold_factor_matches_transcription() {
        let f = threshold_factor(FiringState::new(10.0, 5.0), &small_params()).unwrap();
        for g in 0..2 {
            assert!(rel(f[g], F_SMALL[g]) < 1e-12, "{} vs {}", f[g], F_SMALL[g]);
        }
    }

    #[test]
    fn local_dynamics_matches_transcription() {
        let p = small_params();
        let d = local_dynamics(FiringState::new(10.0, 5.0), &p).unwrap();
        let expect_drift = [-3.0382084809654753, -2.3893281803620532];
        let expect_diff = [79.394168235568737, 29.772813088338276];
        for g in 0..2 {
            assert!(rel(d.drift[g], expect_drift[g]) < 1e-12, "{:?}", d.drift);
            assert!(rel(d.diffusion[g], expect_diff[g]) < 1e-12, "{:?}", d.diffusion);
            assert!(rel(d.metric[g] * d.diffusion[g], 1.0) < 1e-12);
        }
    }

    #[test]
    fn radicand_domain_error() {
        let mut p = small_params();
        p.pol_mean = [[0.0; 2]; 2];
        // Large negative firing drives the radicand through zero.
        p.background = [[0.0; 2]; 2];
        let err = threshold_factor(FiringState::new(-80.0, -30.0), &p);
        assert!(matches!(err, Err(SmniError::ParameterDomain { .. })));
    }

    #[test]
    fn long_block_with_zero_magnitudes_reduces_to_local_form() {
        let p = small_params();
        let mut q = p.clone();
        q.long = Some(LongRangedParams { pol_mean: 0.3, m_dagger: 12.0, ..Default::default() });
        let s = FiringState::new(10.0, 5.0);
        assert_eq!(threshold_factor(s, &p).unwrap(), threshold_factor(s, &q).unwrap());
    }

    #[test]
    fn long_block_only_touches_excitatory() {
        let p = small_params();
        let mut q = p.clone();
        q.long =
            Some(LongRangedParams { n_dagger: 8.0, efficacy: 0.01, background: 0.005, pol_mean: 0.1, m_dagger: 3.0 });
        let s = FiringState::new(10.0, 5.0);
        let f = threshold_factor(s, &p).unwrap();
        let h = threshold_factor(s, &q).unwrap();
        assert_ne!(f[0], h[0]);
        assert_eq!(f[1], h[1]);
    }

    #[test]
    fn lagrangian_zero_along_drift_and_single_term() {
        let p = small_params();
        let s = FiringState::new(10.0, 5.0);
        let d = local_dynamics(s, &p).unwrap();
        assert_eq!(lagrangian(s, d.drift, &p, None).unwrap(), 0.0);
        let delta = 0.7;
        let l = lagrangian(s, [d.drift[0] + delta, d.drift[1]], &p, None).unwrap();
        let hand = delta * delta * d.metric[0] / (2.0 * 110.0);
        assert!(rel(l, hand) < 1e-14);
    }

    #[test]
    fn nearest_neighbor_potential_subtracts() {
        let mut p = small_params();
        p.nn_coeff = [0.5, 0.25];
        let s = FiringState::new(10.0, 5.0);
        let d = local_dynamics(s, &p).unwrap();
        let l = lagrangian(s, d.drift, &p, Some([2.0, 4.0])).unwrap();
        assert!((l - (-(0.5 * 4.0 + 0.25 * 16.0))).abs() < 1e-12);
        p.nn_coeff = [0.0; 2];
        assert_eq!(lagrangian(s, d.drift, &p, Some([2.0, 4.0])).unwrap(), 0.0);
    }

    #[test]
    fn short_time_density_at_drift_is_prefactor() {
        let p = small_params();
        let from = FiringState::new(10.0, 5.0);
        let d = local_dynamics(from, &p).unwrap();
        let to = FiringState::new(from.m_e + p.tau * d.drift[0], from.m_i + p.tau * d.drift[1]);
        let dens = short_time_probability(from, to, &p).unwrap();
        let pref = (2.0 * PI * p.tau).powf(-0.5) * d.det_metric.sqrt();
        assert!(rel(dens, pref) < 1e-12);
        let far = short_time_probability(from, FiringState::new(-60.0, 25.0), &p).unwrap();
        assert!(far >= 0.0);
    }

    #[test]
    fn density_mode_sits_on_drift_target() {
        let p = small_params();
        let from = FiringState::new(10.0, 5.0);
        let d = local_dynamics(from, &p).unwrap();
        let h = 0.05;
        let mut best = (f64::MIN, 0.0, 0.0);
        for i in 0..=400 {
            for j in 0..=400 {
                let to = FiringState::new(from.m_e - 10.0 + i as f64 * h, from.m_i - 10.0 + j as f64 * h);
                let v = short_time_probability(from, to, &p).unwrap();
                if v > best.0 {
                    best = (v, to.m_e, to.m_i);
                }
            }
        }
        assert!((best.1 - (from.m_e + d.drift[0])).abs() <= h);
        assert!((best.2 - (from.m_i + d.drift[1])).abs() <= h);
    }

    #[test]
    fn centering_zeroes_threshold_and_drift() {
        let p = stm_params();
        let c = center_background_with_shift(&p, FiringState::ORIGIN).unwrap();
        let f = threshold_factor(FiringState::ORIGIN, &c.params).unwrap();
        assert!(f[0].abs() < 1e-10 && f[1].abs() < 1e-10);
        let d = local_dynamics(FiringState::ORIGIN, &c.params).unwrap();
        assert_eq!(d.drift, [0.0, 0.0]);
        assert_eq!(c.params.efficacy, p.efficacy);
        assert_eq!(c.params.pol_mean, p.pol_mean);
    }

    #[test]
    fn centering_is_a_fixed_point() {
        let c1 = center_background(&stm_params(), FiringState::ORIGIN).unwrap();
        let c2 = center_background_with_shift(&c1, FiringState::ORIGIN).unwrap();
        assert!(c2.shift.iter().all(|s| s.abs() < 1e-12), "{:?}", c2.shift);
        assert_eq!(c2.params, c1);
    }

    #[test]
    fn centering_shift_matches_bisection() {
        let p = stm_params();
        let c = center_background_with_shift(&p, FiringState::ORIGIN).unwrap();
        for g in 0..2 {
            let f_of = |s: f64| {
                let mut q = p.clone();
                q.background[g] = [(p.background[g][0] + s).max(0.0), (p.background[g][1] + s).max(0.0)];
                threshold_factor(FiringState::ORIGIN, &q).unwrap()[g]
            };
            let (mut lo, mut hi) = (-0.1, 10.0);
            assert!(f_of(lo).signum() != f_of(hi).signum());
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f_of(mid).signum() == f_of(lo).signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            assert!((c.shift[g] - 0.5 * (lo + hi)).abs() < 1e-10, "{} vs {}", c.shift[g], lo);
        }
    }

    #[test]
    fn centering_infeasible_when_numerator_cannot_vanish() {
        let mut p = small_params();
        // Negative threshold with positive polarizations: only a negative
        // background could zero the numerator.
        p.threshold = [-5.0, 0.1];
        match center_background(&p, FiringState::ORIGIN) {
            Err(SmniError::Infeasible { pop, .. }) => assert_eq!(pop, Pop::Excitatory),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }
}
