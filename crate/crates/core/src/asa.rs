//! Adaptive simulated annealing.
//!
//! Generation temperatures follow `T_i(k) = T0_i · exp(-c_i · k^{1/D})`, one
//! per parameter. Candidates are drawn with the ASA generating map
//!
//! ```text
//! y = sgn(u - ½) · T · [(1 + 1/T)^{|2u - 1|} - 1],   u ~ U[0, 1)
//! x' = x + y · (hi - lo)
//! ```
//!
//! resampling a coordinate until it falls inside its bounds. Acceptance is
//! Boltzmann with its own exponential schedule indexed by the number of
//! accepted moves. Re-annealing rescales each parameter's annealing time from
//! finite-difference sensitivities at the best point so that insensitive
//! parameters are searched hotter.

use std::io::{self, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{seeded, SimRng};

/// Rejection cap per coordinate in [`generate_candidate`].
pub const MAX_GENERATION_TRIES: usize = 10_000;

/// Finite-difference step for sensitivities, as a fraction of each range.
pub const SENSITIVITY_STEP: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AsaError {
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("no in-bounds candidate for parameter {param} after {tries} draws")]
    DegenerateBounds { param: usize, tries: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    ranges: Vec<(f64, f64)>,
}

impl Bounds {
    pub fn new(ranges: Vec<(f64, f64)>) -> Result<Self, AsaError> {
        if ranges.is_empty() {
            return Err(AsaError::InvalidBounds("no parameters".into()));
        }
        for (i, &(lo, hi)) in ranges.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(AsaError::InvalidBounds(format!("parameter {i}: need lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(Self { ranges })
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn lo(&self, i: usize) -> f64 {
        self.ranges[i].0
    }

    pub fn hi(&self, i: usize) -> f64 {
        self.ranges[i].1
    }

    pub fn width(&self, i: usize) -> f64 {
        self.ranges[i].1 - self.ranges[i].0
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.ranges).all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }
}

/// Exponential annealing schedule plus run budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSchedule {
    /// Initial generation temperature per parameter.
    pub t0: Vec<f64>,
    /// Schedule constant per parameter.
    pub c: Vec<f64>,
    /// Initial acceptance temperature; `None` uses `|cost|` of the first point.
    #[serde(default)]
    pub t0_accept: Option<f64>,
    /// Schedule constant for the acceptance temperature.
    pub c_accept: f64,
    /// Maximum number of cost evaluations.
    pub budget: usize,
    /// Re-anneal after this many accepted moves (0 disables).
    #[serde(default)]
    pub reanneal_every: usize,
    /// Stop as soon as the best cost reaches this value.
    #[serde(default)]
    pub target_cost: Option<f64>,
}

impl AnnealSchedule {
    /// Same `t0` and `c` for every parameter; acceptance uses `c` as well.
    pub fn uniform(dim: usize, t0: f64, c: f64, budget: usize) -> Self {
        Self {
            t0: vec![t0; dim],
            c: vec![c; dim],
            t0_accept: None,
            c_accept: c,
            budget,
            reanneal_every: 0,
            target_cost: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.t0.len()
    }

    pub fn validate(&self, bounds: &Bounds) -> Result<(), AsaError> {
        let bad = |m: String| Err(AsaError::InvalidSchedule(m));
        if self.t0.len() != bounds.dim() || self.c.len() != bounds.dim() {
            return bad(format!(
                "schedule dimension {} / {} does not match bounds dimension {}",
                self.t0.len(),
                self.c.len(),
                bounds.dim()
            ));
        }
        if self.t0.iter().chain(&self.c).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("t0 and c must be positive and finite".into());
        }
        if !(self.c_accept > 0.0) {
            return bad("c_accept must be positive".into());
        }
        if let Some(t) = self.t0_accept {
            if !(t > 0.0) {
                return bad("t0_accept must be positive".into());
            }
        }
        if self.budget == 0 {
            return bad("budget must be at least 1".into());
        }
        Ok(())
    }
}

/// `T0_i · exp(-c_i · k^{1/D})`
pub fn temperature(schedule: &AnnealSchedule, k: f64, param: usize) -> f64 {
    let d = schedule.dim() as f64;
    schedule.t0[param] * (-schedule.c[param] * k.max(0.0).powf(1.0 / d)).exp()
}

pub fn acceptance_temperature(schedule: &AnnealSchedule, t0_accept: f64, k_accept: f64) -> f64 {
    let d = schedule.dim() as f64;
    t0_accept * (-schedule.c_accept * k_accept.max(0.0).powf(1.0 / d)).exp()
}

/// The ASA generating map from a uniform deviate `u ∈ [0, 1)` to a step in
/// units of the parameter range.
pub fn generating_offset(u: f64, t: f64) -> f64 {
    let t = t.max(f64::MIN_POSITIVE);
    let expo = (2.0 * u - 1.0).abs();
    if expo == 0.0 {
        return 0.0;
    }
    // ln(1 + 1/T), stable for subnormal-adjacent T.
    let log_base = if t < 1e-300 { -t.ln() } else { (1.0 / t).ln_1p() };
    let mag = t * (expo * log_base).exp_m1();
    if u < 0.5 {
        -mag
    } else {
        mag
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluated {
    pub x: Vec<f64>,
    pub cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnealState {
    /// Effective annealing time per parameter (after re-annealing).
    pub k: Vec<f64>,
    /// Unscaled annealing time: number of generated candidates.
    pub k_base: Vec<f64>,
    pub k_accept: f64,
    pub t0_accept: f64,
    pub current: Evaluated,
    pub best: Evaluated,
    pub evals: usize,
}

impl AnnealState {
    pub fn new(start: Evaluated, t0_accept: f64) -> Self {
        let d = start.x.len();
        Self {
            k: vec![0.0; d],
            k_base: vec![0.0; d],
            k_accept: 0.0,
            t0_accept,
            best: start.clone(),
            current: start,
            evals: 1,
        }
    }

    pub fn temperatures(&self, schedule: &AnnealSchedule) -> Vec<f64> {
        (0..self.k.len()).map(|i| temperature(schedule, self.k[i], i)).collect()
    }
}

pub fn generate_candidate<R: Rng + ?Sized>(
    state: &AnnealState,
    schedule: &AnnealSchedule,
    bounds: &Bounds,
    rng: &mut R,
) -> Result<Vec<f64>, AsaError> {
    let mut out = Vec::with_capacity(bounds.dim());
    for i in 0..bounds.dim() {
        let t = temperature(schedule, state.k[i], i);
        let x = state.current.x[i];
        let mut placed = None;
        for _ in 0..MAX_GENERATION_TRIES {
            let u: f64 = rng.random();
            let cand = x + generating_offset(u, t) * bounds.width(i);
            if cand >= bounds.lo(i) && cand <= bounds.hi(i) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(v) => out.push(v),
            None => return Err(AsaError::DegenerateBounds { param: i, tries: MAX_GENERATION_TRIES }),
        }
    }
    Ok(out)
}

/// Boltzmann acceptance at temperature `temp`.
pub fn accept<R: Rng + ?Sized>(current: f64, candidate: f64, temp: f64, rng: &mut R) -> bool {
    if candidate <= current {
        return true;
    }
    if candidate.is_nan() {
        return false;
    }
    let p = (-(candidate - current) / temp).exp();
    rng.random::<f64>() < p
}

/// Rescale annealing times so that `T_i' = T_i(k_base_i) · s_max / s_i`.
///
/// Parameters with zero or non-finite sensitivity keep their time; with no
/// positive sensitivity at all this is a no-op.
pub fn reanneal(state: &AnnealState, schedule: &AnnealSchedule, sensitivities: &[f64]) -> AnnealState {
    let mut next = state.clone();
    let s_max = sensitivities.iter().copied().filter(|s| s.is_finite()).fold(0.0f64, f64::max);
    if !(s_max > 0.0) {
        return next;
    }
    let d = schedule.dim() as f64;
    for (i, &s) in sensitivities.iter().enumerate() {
        if !(s.is_finite() && s > 0.0) {
            continue;
        }
        if s == s_max {
            next.k[i] = state.k_base[i];
            continue;
        }
        let t = temperature(schedule, state.k_base[i], i);
        let t_new = t * (s_max / s);
        next.k[i] = if t_new >= schedule.t0[i] { 0.0 } else { ((schedule.t0[i] / t_new).ln() / schedule.c[i]).powf(d) };
    }
    next
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub eval: usize,
    /// Effective annealing time of the first parameter.
    pub k: f64,
    /// Generation temperature of the first parameter.
    pub temperature: f64,
    pub cost: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsaOutcome {
    pub best: Evaluated,
    pub trace: Vec<TraceRecord>,
    pub evals: usize,
    /// Stopped because the evaluation budget ran out before `target_cost`.
    pub budget_exhausted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub point: Vec<f64>,
    pub cost: f64,
    /// Generation temperatures at the step that produced this record.
    pub temperatures: Vec<f64>,
    pub accepted: bool,
}

fn eval_cost<F: Fn(&[f64]) -> f64>(cost: &F, x: &[f64]) -> f64 {
    let c = cost(x);
    if c.is_nan() {
        f64::INFINITY
    } else {
        c
    }
}

struct Annealer<'a, F> {
    cost: &'a F,
    bounds: &'a Bounds,
    schedule: &'a AnnealSchedule,
    rng: SimRng,
    state: AnnealState,
    accepted_since_reanneal: usize,
}

impl<'a, F: Fn(&[f64]) -> f64> Annealer<'a, F> {
    fn start(cost: &'a F, bounds: &'a Bounds, schedule: &'a AnnealSchedule, seed: u64) -> Result<Self, AsaError> {
        schedule.validate(bounds)?;
        let mut rng = seeded(seed);
        let x: Vec<f64> = (0..bounds.dim()).map(|i| bounds.lo(i) + rng.random::<f64>() * bounds.width(i)).collect();
        let c = eval_cost(cost, &x);
        let t0_accept = schedule.t0_accept.unwrap_or_else(|| {
            let a = c.abs();
            if a.is_finite() && a > 0.0 {
                a
            } else {
                1.0
            }
        });
        Ok(Self {
            cost,
            bounds,
            schedule,
            rng,
            state: AnnealState::new(Evaluated { x, cost: c }, t0_accept),
            accepted_since_reanneal: 0,
        })
    }

    fn first_record(&self) -> TraceRecord {
        TraceRecord {
            eval: 0,
            k: self.state.k[0],
            temperature: temperature(self.schedule, self.state.k[0], 0),
            cost: self.state.current.cost,
            accepted: true,
        }
    }

    /// One generate/evaluate/accept cycle.
    fn step(&mut self) -> Result<(TraceRecord, Vec<f64>), AsaError> {
        let temps = self.state.temperatures(self.schedule);
        let cand = generate_candidate(&self.state, self.schedule, self.bounds, &mut self.rng)?;
        let c = eval_cost(self.cost, &cand);
        let record_k = self.state.k[0];
        self.state.evals += 1;
        for i in 0..self.state.k.len() {
            self.state.k[i] += 1.0;
            self.state.k_base[i] += 1.0;
        }
        let t_acc = acceptance_temperature(self.schedule, self.state.t0_accept, self.state.k_accept);
        let accepted = accept(self.state.current.cost, c, t_acc, &mut self.rng);
        if c < self.state.best.cost {
            self.state.best = Evaluated { x: cand.clone(), cost: c };
        }
        if accepted {
            self.state.current = Evaluated { x: cand, cost: c };
            self.state.k_accept += 1.0;
            self.accepted_since_reanneal += 1;
            if self.schedule.reanneal_every > 0 && self.accepted_since_reanneal >= self.schedule.reanneal_every {
                self.accepted_since_reanneal = 0;
                self.maybe_reanneal();
            }
        }
        let record = TraceRecord { eval: self.state.evals - 1, k: record_k, temperature: temps[0], cost: c, accepted };
        Ok((record, temps))
    }

    fn maybe_reanneal(&mut self) {
        let d = self.bounds.dim();
        if self.state.evals + d > self.schedule.budget {
            return;
        }
        let sens = sensitivities(self.cost, self.bounds, &self.state.best);
        self.state.evals += d;
        self.state = reanneal(&self.state, self.schedule, &sens);
    }

    fn done(&self) -> bool {
        self.state.evals >= self.schedule.budget || self.reached_target()
    }

    fn reached_target(&self) -> bool {
        self.schedule.target_cost.is_some_and(|t| self.state.best.cost <= t)
    }
}

/// `|∂cost/∂x_i|` at `at` by one-sided differences of size
/// [`SENSITIVITY_STEP`] times the range.
pub fn sensitivities<F: Fn(&[f64]) -> f64>(cost: &F, bounds: &Bounds, at: &Evaluated) -> Vec<f64> {
    (0..bounds.dim())
        .map(|i| {
            let h = SENSITIVITY_STEP * bounds.width(i);
            let mut x = at.x.clone();
            let step = if x[i] + h <= bounds.hi(i) { h } else { -h };
            x[i] += step;
            ((eval_cost(cost, &x) - at.cost) / step).abs()
        })
        .collect()
}

/// Minimize `cost` over `bounds`. Deterministic for a given seed.
pub fn optimize<F: Fn(&[f64]) -> f64>(
    cost: &F,
    bounds: &Bounds,
    schedule: &AnnealSchedule,
    seed: u64,
) -> Result<AsaOutcome, AsaError> {
    let mut run = Annealer::start(cost, bounds, schedule, seed)?;
    let mut trace = vec![run.first_record()];
    while !run.done() {
        let (rec, _) = run.step()?;
        trace.push(rec);
    }
    Ok(AsaOutcome { budget_exhausted: !run.reached_target(), best: run.state.best, evals: run.state.evals, trace })
}

/// Importance sample: the chain's current point after each of `n` steps,
/// with the generation temperatures in force at that step. The budget and
/// target of `schedule` are ignored.
pub fn sample<F: Fn(&[f64]) -> f64>(
    cost: &F,
    bounds: &Bounds,
    schedule: &AnnealSchedule,
    n: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>, AsaError> {
    let mut sched = schedule.clone();
    sched.budget = usize::MAX;
    sched.target_cost = None;
    let mut run = Annealer::start(cost, bounds, &sched, seed)?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (rec, temps) = run.step()?;
        out.push(SampleRecord {
            point: run.state.current.x.clone(),
            cost: run.state.current.cost,
            temperatures: temps,
            accepted: rec.accepted,
        });
    }
    Ok(out)
}

pub fn write_trace_csv<W: Write>(trace: &[TraceRecord], mut w: W) -> io::Result<()> {
    writeln!(w, "eval,k,temperature,cost,accepted")?;
    for r in trace {
        writeln!(w, "{},{},{},{},{}", r.eval, r.k, r.temperature, r.cost, r.accepted as u8)?;
    }
    Ok(())
}
