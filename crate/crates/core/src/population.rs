//! Regions of macrocolumns coupled by delayed long-ranged fibers, evolved as
//! Langevin ensembles and compared against Idea patterns.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::asa::{self, AnnealSchedule, AsaError, Bounds};
use crate::pathint::{GridDistribution, PathintError};
use crate::rng::{substream, SimRng};
use crate::smni::{local_dynamics, transition_action, ColumnParams, FiringState, Pop, SmniError};

/// Default Langevin ensemble size.
pub const DEFAULT_ENSEMBLE: usize = 256;

pub type RegionId = String;

#[derive(Debug, Error)]
pub enum PopulationError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] SmniError),
    #[error(transparent)]
    Asa(#[from] AsaError),
    #[error(transparent)]
    Grid(#[from] PathintError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Column {
    pub params: ColumnParams,
    #[serde(default = "origin")]
    pub state: FiringState,
}

fn origin() -> FiringState {
    FiringState::ORIGIN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub id: RegionId,
    pub columns: Vec<Column>,
    /// 1-D or 2-D lattice extent (row-major) for nearest-neighbor terms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Connection {
    pub src: RegionId,
    pub dst: RegionId,
    /// Scales the delayed upstream mean `M^E` into the destination's `M†`.
    pub weight: f64,
    /// Epochs of fiber delay; at least 1.
    pub delay: usize,
    #[serde(default)]
    pub allow_self: bool,
}

/// Additive `M†` contribution over epochs `start..end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveWindow {
    pub start: usize,
    pub end: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExogenousDrive {
    pub region: RegionId,
    pub schedule: Vec<DriveWindow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationGraph {
    pub regions: Vec<Region>,
    #[serde(default)]
    pub connections: Vec<Connection>,
    #[serde(default)]
    pub drives: Vec<ExogenousDrive>,
}

impl PopulationGraph {
    pub fn validate(&self) -> Result<(), PopulationError> {
        let cfg = |m: String| Err(PopulationError::Config(m));
        if self.regions.is_empty() {
            return cfg("population has no regions".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.regions {
            if !seen.insert(r.id.as_str()) {
                return cfg(format!("duplicate region id `{}`", r.id));
            }
            if r.columns.is_empty() {
                return cfg(format!("region `{}` has no columns", r.id));
            }
            if let Some(shape) = &r.lattice {
                if shape.is_empty() || shape.len() > 2 || shape.iter().product::<usize>() != r.columns.len() {
                    return cfg(format!(
                        "region `{}`: lattice {:?} does not match {} columns",
                        r.id,
                        shape,
                        r.columns.len()
                    ));
                }
            }
            for (j, c) in r.columns.iter().enumerate() {
                c.params.validate()?;
                if !c.params.contains(c.state) {
                    return cfg(format!("region `{}` column {j}: initial state outside firing bounds", r.id));
                }
            }
        }
        for c in &self.connections {
            let (Ok(_), Ok(dst)) = (self.region_index(&c.src), self.region_index(&c.dst)) else {
                return cfg(format!("connection {} -> {} references an unknown region", c.src, c.dst));
            };
            if c.src == c.dst && !c.allow_self {
                return cfg(format!("self-connection on `{}` needs allow_self = true", c.src));
            }
            if !(c.weight >= 0.0 && c.weight.is_finite()) {
                return cfg(format!("connection {} -> {}: weight must be nonnegative", c.src, c.dst));
            }
            if c.delay == 0 {
                return cfg(format!("connection {} -> {}: delay must be at least 1 epoch", c.src, c.dst));
            }
            self.require_long_block(dst)?;
        }
        let mut windows: BTreeMap<&str, Vec<&DriveWindow>> = BTreeMap::new();
        for d in &self.drives {
            let r = self.region_index(&d.region)?;
            self.require_long_block(r)?;
            for w in &d.schedule {
                if w.end <= w.start || !w.value.is_finite() {
                    return cfg(format!("drive on `{}`: bad window {}..{}", d.region, w.start, w.end));
                }
                windows.entry(d.region.as_str()).or_default().push(w);
            }
        }
        for (region, mut ws) in windows {
            ws.sort_by_key(|w| w.start);
            for pair in ws.windows(2) {
                if pair[1].start < pair[0].end {
                    return cfg(format!("drive windows on `{region}` overlap"));
                }
            }
        }
        Ok(())
    }

    fn require_long_block(&self, r: usize) -> Result<(), PopulationError> {
        let region = &self.regions[r];
        if let Some(j) = region.columns.iter().position(|c| c.params.long.is_none()) {
            return Err(PopulationError::Config(format!(
                "region `{}` receives long-ranged input but column {j} has no `long` block",
                region.id
            )));
        }
        Ok(())
    }

    pub fn region_index(&self, id: &str) -> Result<usize, PopulationError> {
        self.regions
            .iter()
            .position(|r| r.id == id)
            .ok_or_else(|| PopulationError::Config(format!("unknown region `{id}`")))
    }

    pub fn max_delay(&self) -> usize {
        self.connections.iter().map(|c| c.delay).max().unwrap_or(1).max(1)
    }

    pub fn initial_states(&self) -> Vec<Vec<FiringState>> {
        self.regions.iter().map(|r| r.columns.iter().map(|c| c.state).collect()).collect()
    }

    fn drive_at(&self, region: &str, epoch: usize) -> f64 {
        self.drives
            .iter()
            .filter(|d| d.region == region)
            .flat_map(|d| &d.schedule)
            .filter(|w| (w.start..w.end).contains(&epoch))
            .map(|w| w.value)
            .sum()
    }
}

/// Per-region history of mean excitatory firing, newest last.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayHistory {
    depth: usize,
    means: Vec<VecDeque<f64>>,
}

impl DelayHistory {
    pub fn empty(regions: usize, depth: usize) -> Self {
        Self { depth: depth.max(1), means: vec![VecDeque::with_capacity(depth.max(1)); regions] }
    }

    /// History filled as if `states` had held for `depth` epochs.
    pub fn prefilled(states: &[Vec<FiringState>], depth: usize) -> Self {
        let mut h = Self::empty(states.len(), depth);
        for _ in 0..h.depth {
            h.push(states);
        }
        h
    }

    pub fn push(&mut self, states: &[Vec<FiringState>]) {
        for (q, cols) in self.means.iter_mut().zip(states) {
            if q.len() == self.depth {
                q.pop_front();
            }
            q.push_back(mean_excitatory(cols));
        }
    }

    /// Mean `M^E` of `region` as it was `delay - 1` epochs before the newest entry.
    pub fn lagged(&self, region: usize, delay: usize) -> Option<f64> {
        let q = &self.means[region];
        q.len().checked_sub(delay).and_then(|i| q.get(i)).copied()
    }
}

fn mean_excitatory(cols: &[FiringState]) -> f64 {
    cols.iter().map(|s| s.m_e).sum::<f64>() / cols.len() as f64
}

/// Long-ranged afferent firing `M†` of every region at `epoch`.
pub fn afferent_firings(
    graph: &PopulationGraph,
    history: &DelayHistory,
    epoch: usize,
) -> Result<Vec<f64>, PopulationError> {
    let mut out: Vec<f64> = graph.regions.iter().map(|r| graph.drive_at(&r.id, epoch)).collect();
    for c in &graph.connections {
        let src = graph.region_index(&c.src)?;
        let dst = graph.region_index(&c.dst)?;
        let upstream = history.lagged(src, c.delay).ok_or_else(|| {
            PopulationError::Config(format!("history holds fewer than {} epochs for `{}`", c.delay, c.src))
        })?;
        out[dst] += c.weight * upstream;
    }
    Ok(out)
}

/// Parameters with `M†` set, clamped to the long-ranged firing range `±N†`.
fn with_afferent(params: &ColumnParams, m_dagger: f64) -> ColumnParams {
    let mut p = params.clone();
    if let Some(long) = p.long.as_mut() {
        long.m_dagger = m_dagger.clamp(-long.n_dagger, long.n_dagger);
    }
    p
}

/// Advance every column one epoch of length `τ`. `noise_scale` multiplies the
/// stochastic term (1 for the model; 0 gives the deterministic flow).
/// Returns the `M†` applied to each region.
pub fn langevin_step<R: Rng + ?Sized>(
    graph: &PopulationGraph,
    states: &mut [Vec<FiringState>],
    history: &mut DelayHistory,
    epoch: usize,
    rng: &mut R,
    noise_scale: f64,
) -> Result<Vec<f64>, PopulationError> {
    let m_dagger = afferent_firings(graph, history, epoch)?;
    for ((region, cols), &md) in graph.regions.iter().zip(states.iter_mut()).zip(&m_dagger) {
        for (col, s) in region.columns.iter().zip(cols.iter_mut()) {
            let p = with_afferent(&col.params, md);
            let d = local_dynamics(*s, &p)?;
            let tau = p.tau;
            let mut m = s.to_array();
            for g in 0..2 {
                let z: f64 = rng.sample(StandardNormal);
                m[g] += tau * d.drift[g] + (tau * d.diffusion[g]).sqrt() * z * noise_scale;
            }
            *s = p.clamp(FiringState::from_array(m));
        }
    }
    history.push(states);
    Ok(m_dagger)
}

/// One Langevin trajectory of the whole graph.
pub struct Simulation<'g> {
    graph: &'g PopulationGraph,
    states: Vec<Vec<FiringState>>,
    history: DelayHistory,
    epoch: usize,
    rng: SimRng,
    noise_scale: f64,
}

impl<'g> Simulation<'g> {
    pub fn new(graph: &'g PopulationGraph, rng: SimRng) -> Result<Self, PopulationError> {
        graph.validate()?;
        Ok(Self::from_states(graph, graph.initial_states(), rng))
    }

    fn from_states(graph: &'g PopulationGraph, states: Vec<Vec<FiringState>>, rng: SimRng) -> Self {
        let history = DelayHistory::prefilled(&states, graph.max_delay());
        Self { graph, states, history, epoch: 0, rng, noise_scale: 1.0 }
    }

    pub fn with_noise_scale(mut self, s: f64) -> Self {
        self.noise_scale = s;
        self
    }

    pub fn step(&mut self) -> Result<Vec<f64>, PopulationError> {
        let md = langevin_step(
            self.graph,
            &mut self.states,
            &mut self.history,
            self.epoch,
            &mut self.rng,
            self.noise_scale,
        )?;
        self.epoch += 1;
        Ok(md)
    }

    pub fn states(&self) -> &[Vec<FiringState>] {
        &self.states
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Negative log-likelihood of a single column trajectory sampled at spacing `τ`.
pub fn effective_action_cost(params: &ColumnParams, trajectory: &[FiringState]) -> Result<f64, PopulationError> {
    if trajectory.len() < 2 {
        return Err(PopulationError::Input("trajectory needs at least 2 epochs".into()));
    }
    let mut total = 0.0;
    for w in trajectory.windows(2) {
        total += transition_action(w[0], w[1], params, None)?;
    }
    Ok(total)
}

/// Action of all columns of a region; with a lattice, the nearest-neighbor
/// potential uses central differences of the prepoint states.
pub fn region_action_cost(
    params: &[ColumnParams],
    trajectories: &[Vec<FiringState>],
    lattice: Option<&[usize]>,
) -> Result<f64, PopulationError> {
    if params.len() != trajectories.len() {
        return Err(PopulationError::Input("one trajectory per column required".into()));
    }
    let len = trajectories.first().map_or(0, Vec::len);
    if len < 2 || trajectories.iter().any(|t| t.len() != len) {
        return Err(PopulationError::Input("trajectories need equal length of at least 2 epochs".into()));
    }
    let mut total = 0.0;
    for t in 0..len - 1 {
        let now: Vec<FiringState> = trajectories.iter().map(|tr| tr[t]).collect();
        for (j, p) in params.iter().enumerate() {
            let grad = lattice.map(|shape| lattice_gradient(&now, shape, j));
            total += transition_action(trajectories[j][t], trajectories[j][t + 1], p, grad)?;
        }
    }
    Ok(total)
}

/// `|∇M^G|` at column `j` of a row-major lattice, unit spacing.
fn lattice_gradient(states: &[FiringState], shape: &[usize], j: usize) -> [f64; 2] {
    let cols = if shape.len() == 2 { shape[1] } else { shape[0] };
    let rows = if shape.len() == 2 { shape[0] } else { 1 };
    let (r, c) = (j / cols, j % cols);
    let at = |r: usize, c: usize| states[r * cols + c].to_array();
    let diff = |lo: [f64; 2], hi: [f64; 2], span: f64| [(hi[0] - lo[0]) / span, (hi[1] - lo[1]) / span];
    let axis = |n: usize, i: usize, get: &dyn Fn(usize) -> [f64; 2]| -> [f64; 2] {
        if n < 2 {
            [0.0, 0.0]
        } else if i == 0 {
            diff(get(0), get(1), 1.0)
        } else if i == n - 1 {
            diff(get(n - 2), get(n - 1), 1.0)
        } else {
            diff(get(i - 1), get(i + 1), 2.0)
        }
    };
    let dx = axis(cols, c, &|k| at(r, k));
    let dy = axis(rows, r, &|k| at(k, c));
    [dx[0].hypot(dy[0]), dx[1].hypot(dy[1])]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdeaPattern {
    /// Target firing per column of each listed region.
    pub targets: BTreeMap<RegionId, Vec<FiringState>>,
    /// Match radius in firing units.
    pub tolerance: f64,
}

impl IdeaPattern {
    pub fn validate(&self, graph: &PopulationGraph) -> Result<(), PopulationError> {
        if !(self.tolerance > 0.0) {
            return Err(PopulationError::Config("pattern tolerance must be positive".into()));
        }
        for (id, targets) in &self.targets {
            let r = &graph.regions[graph.region_index(id)?];
            if targets.len() != r.columns.len() {
                return Err(PopulationError::Config(format!(
                    "pattern for `{id}` has {} targets for {} columns",
                    targets.len(),
                    r.columns.len()
                )));
            }
            for (c, t) in r.columns.iter().zip(targets) {
                if !c.params.contains(*t) {
                    return Err(PopulationError::Config(format!("pattern target for `{id}` is outside firing bounds")));
                }
            }
        }
        Ok(())
    }
}

/// Bhattacharyya coefficient `Σ √(p_i q_i)`.
pub fn overlap(a: &GridDistribution, b: &GridDistribution) -> Result<f64, PopulationError> {
    if a.grid() != b.grid() {
        return Err(PopulationError::Input("overlap needs distributions on a common grid".into()));
    }
    let s: f64 = a.weights().iter().zip(b.weights()).map(|(p, q)| (p * q).sqrt()).sum();
    Ok(s.clamp(0.0, 1.0))
}

/// Histogram grid over one column's firing box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapGrid {
    /// Bin widths along `(M^E, M^I)`.
    pub spacing: [f64; 2],
}

impl Default for OverlapGrid {
    fn default() -> Self {
        Self { spacing: [1.0, 1.0] }
    }
}

/// Pattern cell weights on one column's grid: a discretized Gaussian with
/// standard deviation equal to the pattern tolerance.
struct PatternDensity {
    n: [usize; 2],
    lo: [f64; 2],
    h: [f64; 2],
    target: [f64; 2],
    sd: f64,
    norm: f64,
}

impl PatternDensity {
    fn new(params: &ColumnParams, target: FiringState, sd: f64, grid: &OverlapGrid) -> Self {
        let bounds = params.neurons();
        let mut n = [0; 2];
        let mut h = [0.0; 2];
        let mut lo = [0.0; 2];
        let mut axis_norm = [0.0; 2];
        let t = target.to_array();
        for g in 0..2 {
            n[g] = ((2.0 * bounds[g] / grid.spacing[g]).round() as usize).max(2) + 1;
            lo[g] = -bounds[g];
            h[g] = 2.0 * bounds[g] / (n[g] - 1) as f64;
            axis_norm[g] = (0..n[g])
                .map(|k| {
                    let z = (lo[g] + k as f64 * h[g] - t[g]) / sd;
                    (-0.5 * z * z).exp()
                })
                .sum();
        }
        Self { n, lo, h, target: t, sd, norm: axis_norm[0] * axis_norm[1] }
    }

    fn cell(&self, s: FiringState) -> (usize, usize) {
        let m = s.to_array();
        let k = |g: usize| (((m[g] - self.lo[g]) / self.h[g]).round().max(0.0) as usize).min(self.n[g] - 1);
        (k(0), k(1))
    }

    fn weight(&self, cell: (usize, usize)) -> f64 {
        let z0 = (self.lo[0] + cell.0 as f64 * self.h[0] - self.target[0]) / self.sd;
        let z1 = (self.lo[1] + cell.1 as f64 * self.h[1] - self.target[1]) / self.sd;
        (-0.5 * (z0 * z0 + z1 * z1)).exp() / self.norm
    }

    fn overlap(&self, samples: impl Iterator<Item = FiringState>) -> f64 {
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        let mut n = 0usize;
        for s in samples {
            *counts.entry(self.cell(s)).or_default() += 1;
            n += 1;
        }
        let mut cells: Vec<_> = counts.into_iter().collect();
        cells.sort_unstable();
        let s: f64 = cells.into_iter().map(|(c, k)| (k as f64 / n as f64 * self.weight(c)).sqrt()).sum();
        s.clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegionSnapshot {
    /// Ensemble mean of the region's column-averaged state.
    pub mean: FiringState,
    /// Ensemble covariance of the column-averaged `(M^E, M^I)`.
    pub covariance: [[f64; 2]; 2],
    /// Mean over columns of the pattern overlap; absent for regions outside the pattern.
    pub overlap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropagationResult {
    pub regions: Vec<RegionId>,
    /// `epochs[k][r]` for epochs `0..=n`.
    pub epochs: Vec<Vec<RegionSnapshot>>,
}

impl PropagationResult {
    pub fn overlap_series(&self, region: &str) -> Option<Vec<f64>> {
        let r = self.regions.iter().position(|id| id == region)?;
        self.epochs.iter().map(|e| e[r].overlap).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,region,mean_m_e,mean_m_i,cov_ee,cov_ei,cov_ii,overlap")?;
        for (k, snaps) in self.epochs.iter().enumerate() {
            for (id, s) in self.regions.iter().zip(snaps) {
                let ov = s.overlap.map(|o| o.to_string()).unwrap_or_default();
                writeln!(
                    w,
                    "{k},{id},{},{},{},{},{},{ov}",
                    s.mean.m_e, s.mean.m_i, s.covariance[0][0], s.covariance[0][1], s.covariance[1][1]
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationOptions {
    pub epochs: usize,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    /// Regions whose columns start at the pattern targets.
    #[serde(default)]
    pub seeded: Vec<RegionId>,
    #[serde(default)]
    pub overlap_grid: OverlapGrid,
    #[serde(default = "one")]
    pub noise_scale: f64,
}

fn default_ensemble() -> usize {
    DEFAULT_ENSEMBLE
}

fn one() -> f64 {
    1.0
}

impl PropagationOptions {
    pub fn new(epochs: usize, ensemble: usize) -> Self {
        Self { epochs, ensemble, seeded: Vec::new(), overlap_grid: OverlapGrid::default(), noise_scale: 1.0 }
    }
}

/// States of every member: `[member][epoch][region][column]`.
type EnsembleRun = Vec<Vec<Vec<Vec<FiringState>>>>;

fn seeded_states(
    graph: &PopulationGraph,
    pattern: &IdeaPattern,
    seeded: &[RegionId],
) -> Result<Vec<Vec<FiringState>>, PopulationError> {
    let mut states = graph.initial_states();
    for id in seeded {
        let r = graph.region_index(id)?;
        let t = pattern
            .targets
            .get(id)
            .ok_or_else(|| PopulationError::Config(format!("seeded region `{id}` is not in the pattern")))?;
        states[r] = t.clone();
    }
    Ok(states)
}

fn run_ensemble(
    graph: &PopulationGraph,
    start: &[Vec<FiringState>],
    epochs: usize,
    ensemble: usize,
    seed: u64,
    noise_scale: f64,
) -> Result<EnsembleRun, PopulationError> {
    (0..ensemble)
        .into_par_iter()
        .map(|member| {
            let mut sim = Simulation::from_states(graph, start.to_vec(), substream(seed, member as u64))
                .with_noise_scale(noise_scale);
            let mut path = Vec::with_capacity(epochs + 1);
            path.push(sim.states.clone());
            for _ in 0..epochs {
                sim.step()?;
                path.push(sim.states.clone());
            }
            Ok(path)
        })
        .collect()
}

/// Evolve an ensemble and report per-epoch region moments and pattern overlap.
/// Member `i` draws from ChaCha stream `i` of `seed`.
pub fn propagation_experiment(
    graph: &PopulationGraph,
    pattern: &IdeaPattern,
    opts: &PropagationOptions,
    seed: u64,
) -> Result<PropagationResult, PopulationError> {
    graph.validate()?;
    pattern.validate(graph)?;
    if opts.ensemble == 0 {
        return Err(PopulationError::Config("ensemble size must be at least 1".into()));
    }
    let start = seeded_states(graph, pattern, &opts.seeded)?;
    let run = run_ensemble(graph, &start, opts.epochs, opts.ensemble, seed, opts.noise_scale)?;

    let densities: Vec<Option<Vec<PatternDensity>>> = graph
        .regions
        .iter()
        .map(|r| {
            pattern.targets.get(&r.id).map(|targets| {
                r.columns
                    .iter()
                    .zip(targets)
                    .map(|(c, t)| PatternDensity::new(&c.params, *t, pattern.tolerance, &opts.overlap_grid))
                    .collect()
            })
        })
        .collect();

    let epochs = (0..=opts.epochs)
        .into_par_iter()
        .map(|k| {
            graph
                .regions
                .iter()
                .enumerate()
                .map(|(r, region)| {
                    let avgs: Vec<[f64; 2]> = run
                        .iter()
                        .map(|m| {
                            let cols = &m[k][r];
                            let n = cols.len() as f64;
                            [cols.iter().map(|s| s.m_e).sum::<f64>() / n, cols.iter().map(|s| s.m_i).sum::<f64>() / n]
                        })
                        .collect();
                    let (mean, covariance) = moments(&avgs);
                    let overlap = densities[r].as_ref().map(|dens| {
                        (0..region.columns.len()).map(|j| dens[j].overlap(run.iter().map(|m| m[k][r][j]))).sum::<f64>()
                            / region.columns.len() as f64
                    });
                    RegionSnapshot { mean: FiringState::from_array(mean), covariance, overlap }
                })
                .collect()
        })
        .collect();
    Ok(PropagationResult { regions: graph.regions.iter().map(|r| r.id.clone()).collect(), epochs })
}

fn moments(xs: &[[f64; 2]]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = xs.len() as f64;
    let mut m = [0.0; 2];
    for x in xs {
        m[0] += x[0] / n;
        m[1] += x[1] / n;
    }
    let mut c = [[0.0; 2]; 2];
    for x in xs {
        let d = [x[0] - m[0], x[1] - m[1]];
        for a in 0..2 {
            for b in 0..2 {
                c[a][b] += d[a] * d[b] / n;
            }
        }
    }
    c[1][0] = c[0][1];
    (m, c)
}

/// A column parameter exposed to the fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FreeParam {
    /// `V^G`
    Threshold { pop: Pop },
    /// `A^G_{G'}`
    Efficacy { pop: Pop, from: Pop },
    /// `B^G_{G'}`
    Background { pop: Pop, from: Pop },
    /// Uniform additive shift of row `G` of `B`, clamped at zero.
    BackgroundShift { pop: Pop },
    /// `v^G_{G'}`
    PolMean { pop: Pop, from: Pop },
}

impl FreeParam {
    fn apply(self, base: &ColumnParams, p: &mut ColumnParams, value: f64) {
        match self {
            FreeParam::Threshold { pop } => p.threshold[pop.index()] = value,
            FreeParam::Efficacy { pop, from } => p.efficacy[pop.index()][from.index()] = value,
            FreeParam::Background { pop, from } => p.background[pop.index()][from.index()] = value,
            FreeParam::BackgroundShift { pop } => {
                let g = pop.index();
                for gp in 0..2 {
                    p.background[g][gp] = (base.background[g][gp] + value).max(0.0);
                }
            }
            FreeParam::PolMean { pop, from } => p.pol_mean[pop.index()][from.index()] = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreeParamSpec {
    pub param: FreeParam,
    pub lo: f64,
    pub hi: f64,
}

/// Target data for [`fit_idea`].
#[derive(Clone, Debug, PartialEq)]
pub enum FitData {
    /// Observed trajectories per column, keyed by region.
    Trajectories(BTreeMap<RegionId, Vec<Vec<FiringState>>>),
    /// Pattern residency under a fixed-seed ensemble.
    Pattern { pattern: IdeaPattern, epochs: usize, ensemble: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    /// Fitted parameters of every column in the subset, in subset order.
    pub columns: Vec<(RegionId, usize, ColumnParams)>,
    pub values: Vec<f64>,
    pub cost: f64,
    pub evals: usize,
    pub budget_exhausted: bool,
    pub trace: Vec<asa::TraceRecord>,
}

/// Fraction of ensemble samples (epochs ≥ 1, pattern columns) farther than the
/// tolerance from their target.
pub fn pattern_residency_cost(
    graph: &PopulationGraph,
    pattern: &IdeaPattern,
    epochs: usize,
    ensemble: usize,
    seed: u64,
) -> Result<f64, PopulationError> {
    let start = graph.initial_states();
    let run = run_ensemble(graph, &start, epochs, ensemble, seed, 1.0)?;
    let mut outside = 0usize;
    let mut total = 0usize;
    for (id, targets) in &pattern.targets {
        let r = graph.region_index(id)?;
        for member in &run {
            for states in &member[1..] {
                for (s, t) in states[r].iter().zip(targets) {
                    total += 1;
                    if s.distance(*t) > pattern.tolerance {
                        outside += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        return Err(PopulationError::Input("pattern residency needs epochs ≥ 1 and a nonempty pattern".into()));
    }
    Ok(outside as f64 / total as f64)
}

/// Fit shared free parameters of every column in `subset` with ASA.
///
/// Each free value is applied to each subset column's base parameters. For
/// trajectory data the cost is the summed effective action; for pattern data
/// it is the residency cost with common random numbers across candidates.
pub fn fit_idea(
    graph: &PopulationGraph,
    subset: &[RegionId],
    data: &FitData,
    free: &[FreeParamSpec],
    schedule: &AnnealSchedule,
    seed: u64,
) -> Result<FitOutcome, PopulationError> {
    graph.validate()?;
    if subset.is_empty() || free.is_empty() {
        return Err(PopulationError::Input("fit needs at least one region and one free parameter".into()));
    }
    let idx: Vec<usize> = subset.iter().map(|id| graph.region_index(id)).collect::<Result<_, _>>()?;
    let bounds = Bounds::new(free.iter().map(|f| (f.lo, f.hi)).collect())?;
    schedule.validate(&bounds)?;

    let candidate = |x: &[f64]| -> PopulationGraph {
        let mut g = graph.clone();
        for &r in &idx {
            for (col, base) in g.regions[r].columns.iter_mut().zip(&graph.regions[r].columns) {
                for (f, &v) in free.iter().zip(x) {
                    f.param.apply(&base.params, &mut col.params, v);
                }
            }
        }
        g
    };

    let cost: Box<dyn Fn(&[f64]) -> f64 + Sync> = match data {
        FitData::Trajectories(map) => {
            for (id, trs) in map {
                let r = graph.region_index(id)?;
                if !idx.contains(&r) {
                    return Err(PopulationError::Input(format!("trajectory for `{id}` is outside the fit subset")));
                }
                if trs.len() != graph.regions[r].columns.len() {
                    return Err(PopulationError::Input(format!("`{id}` needs one trajectory per column")));
                }
                if trs.iter().any(|t| t.len() < 2) {
                    return Err(PopulationError::Input("trajectory needs at least 2 epochs".into()));
                }
            }
            let map = map.clone();
            Box::new(move |x: &[f64]| {
                let g = candidate(x);
                let mut total = 0.0;
                for (id, trs) in &map {
                    let region = g.regions.iter().find(|r| &r.id == id).expect("validated");
                    let params: Vec<ColumnParams> = region.columns.iter().map(|c| c.params.clone()).collect();
                    match region_action_cost(&params, trs, region.lattice.as_deref()) {
                        Ok(c) => total += c,
                        Err(_) => return f64::INFINITY,
                    }
                }
                total
            })
        }
        FitData::Pattern { pattern, epochs, ensemble } => {
            pattern.validate(graph)?;
            if *epochs == 0 || *ensemble == 0 {
                return Err(PopulationError::Input("pattern fit needs epochs and ensemble of at least 1".into()));
            }
            let (pattern, epochs, ensemble) = (pattern.clone(), *epochs, *ensemble);
            let crn_seed = crate::rng::mix64(seed);
            Box::new(move |x: &[f64]| {
                let g = candidate(x);
                pattern_residency_cost(&g, &pattern, epochs, ensemble, crn_seed).unwrap_or(f64::INFINITY)
            })
        }
    };

    let out = asa::optimize(&cost, &bounds, schedule, seed)?;
    let fitted = candidate(&out.best.x);
    let columns = idx
        .iter()
        .flat_map(|&r| {
            let region = &fitted.regions[r];
            region.columns.iter().enumerate().map(move |(j, c)| (region.id.clone(), j, c.params.clone()))
        })
        .collect();
    Ok(FitOutcome {
        columns,
        values: out.best.x,
        cost: out.best.cost,
        evals: out.evals,
        budget_exhausted: out.budget_exhausted,
        trace: out.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pathint::{Axis, Grid};
    use crate::rng::seeded;
    use crate::smni::tests::stm_params;
    use crate::smni::{center_background, LongRangedParams};

    fn long_params() -> ColumnParams {
        let mut p = stm_params();
        p.long =
            Some(LongRangedParams { n_dagger: 10.0, efficacy: 0.5, background: 0.1, pol_mean: 0.1, m_dagger: 0.0 });
        center_background(&p, FiringState::ORIGIN).unwrap()
    }

    fn region(id: &str, p: &ColumnParams, n: usize) -> Region {
        Region {
            id: id.into(),
            columns: vec![Column { params: p.clone(), state: FiringState::ORIGIN }; n],
            lattice: None,
        }
    }

    fn chain(delay: usize) -> PopulationGraph {
        let p = long_params();
        PopulationGraph {
            regions: vec![region("src", &p, 1), region("dst", &p, 1)],
            connections: vec![Connection {
                src: "src".into(),
                dst: "dst".into(),
                weight: 1.0,
                delay,
                allow_self: false,
            }],
            drives: vec![],
        }
    }

    #[test]
    fn validation_rejects_bad_graphs() {
        let mut g = chain(3);
        g.connections[0].delay = 0;
        assert!(g.validate().is_err());
        let mut g = chain(3);
        g.connections[0].dst = "src".into();
        assert!(g.validate().is_err());
        g.connections[0].allow_self = true;
        assert!(g.validate().is_ok());
        let mut g = chain(3);
        g.regions[1].columns[0].params.long = None;
        assert!(g.validate().is_err());
        let mut g = chain(3);
        g.drives.push(ExogenousDrive {
            region: "src".into(),
            schedule: vec![DriveWindow { start: 0, end: 5, value: 1.0 }, DriveWindow { start: 4, end: 6, value: 1.0 }],
        });
        assert!(g.validate().is_err());
        let mut g = chain(3);
        g.regions[0].lattice = Some(vec![2]);
        assert!(g.validate().is_err());
    }

    #[test]
    fn isolated_region_sees_no_afferents() {
        let p = long_params();
        let g = PopulationGraph { regions: vec![region("a", &p, 2)], connections: vec![], drives: vec![] };
        let mut sim = Simulation::new(&g, seeded(1)).unwrap();
        for _ in 0..20 {
            assert_eq!(sim.step().unwrap(), vec![0.0]);
        }
    }

    #[test]
    fn noiseless_centered_column_stays_at_origin() {
        let p = long_params();
        let g = PopulationGraph { regions: vec![region("a", &p, 3)], connections: vec![], drives: vec![] };
        let mut sim = Simulation::new(&g, seeded(1)).unwrap().with_noise_scale(0.0);
        for _ in 0..50 {
            sim.step().unwrap();
        }
        assert!(sim.states()[0].iter().all(|s| *s == FiringState::ORIGIN));
    }

    #[test]
    fn impulse_arrives_after_delay() {
        for delay in [1, 3, 5] {
            let mut g = chain(delay);
            let e = 4;
            g.drives.push(ExogenousDrive {
                region: "src".into(),
                schedule: vec![DriveWindow { start: e, end: e + 1, value: 30.0 }],
            });
            let mut sim = Simulation::new(&g, seeded(0)).unwrap().with_noise_scale(0.0);
            let mut first = None;
            for k in 0..20 {
                let md = sim.step().unwrap();
                if first.is_none() && md[1] != 0.0 {
                    first = Some(k);
                }
            }
            assert_eq!(first, Some(e + delay), "delay {delay}");
        }
    }

    #[test]
    fn empty_history_is_a_config_error() {
        let g = chain(3);
        let mut states = g.initial_states();
        let mut h = DelayHistory::empty(2, 3);
        assert!(matches!(
            langevin_step(&g, &mut states, &mut h, 0, &mut seeded(0), 1.0),
            Err(PopulationError::Config(_))
        ));
    }

    #[test]
    fn states_stay_bounded() {
        let mut p = long_params();
        p.threshold = [-40.0, 40.0];
        let g = PopulationGraph { regions: vec![region("a", &p, 4)], connections: vec![], drives: vec![] };
        let mut sim = Simulation::new(&g, seeded(5)).unwrap();
        for _ in 0..100 {
            sim.step().unwrap();
            assert!(sim.states()[0].iter().all(|s| p.contains(*s)));
        }
    }

    #[test]
    fn noiseless_action_is_prefactor_only() {
        let p = stm_params();
        let mut s = FiringState::new(10.0, -5.0);
        let mut traj = vec![s];
        let mut expected = 0.0;
        for _ in 0..10 {
            let d = local_dynamics(s, &p).unwrap();
            expected += -0.5 * d.det_metric.ln() + 0.5 * (2.0 * std::f64::consts::PI * p.tau).ln();
            s = FiringState::new(s.m_e + p.tau * d.drift[0], s.m_i + p.tau * d.drift[1]);
            traj.push(s);
        }
        let c = effective_action_cost(&p, &traj).unwrap();
        assert!((c - expected).abs() < 1e-9 * expected.abs().max(1.0));
        assert!(effective_action_cost(&p, &traj[..1]).is_err());
    }

    #[test]
    fn lattice_gradient_is_central_difference() {
        let states: Vec<FiringState> = (0..6).map(|j| FiringState::new(j as f64 * 2.0, 0.0)).collect();
        assert_eq!(lattice_gradient(&states, &[6], 0), [2.0, 0.0]);
        assert_eq!(lattice_gradient(&states, &[6], 3), [2.0, 0.0]);
        // 2 x 3: rows differ by 6, columns by 2.
        let g = lattice_gradient(&states, &[2, 3], 4);
        assert!((g[0] - (4.0f64 + 36.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bhattacharyya_examples() {
        let g = Grid::new(vec![Axis::new("x", -12.0, 12.0, 2401)]).unwrap();
        let a = GridDistribution::gaussian(g.clone(), &[-1.0], &[1.0]).unwrap();
        let b = GridDistribution::gaussian(g.clone(), &[1.0], &[1.0]).unwrap();
        assert!((overlap(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let o = overlap(&a, &b).unwrap();
        assert!((o / (-0.5f64).exp() - 1.0).abs() < 0.02);
        let c = GridDistribution::delta(g.clone(), &[-10.0]);
        let d = GridDistribution::delta(g.clone(), &[10.0]);
        assert_eq!(overlap(&c, &d).unwrap(), 0.0);
        let other = Grid::new(vec![Axis::new("x", -12.0, 12.0, 11)]).unwrap();
        assert!(overlap(&a, &GridDistribution::delta(other, &[0.0])).is_err());
    }

    fn pattern_for(g: &PopulationGraph, id: &str, target: FiringState, tol: f64) -> IdeaPattern {
        let n = g.regions[g.region_index(id).unwrap()].columns.len();
        IdeaPattern { targets: BTreeMap::from([(id.to_string(), vec![target; n])]), tolerance: tol }
    }

    #[test]
    fn single_member_matches_rollout() {
        let g = chain(2);
        let pat = pattern_for(&g, "dst", FiringState::new(5.0, 0.0), 4.0);
        let res = propagation_experiment(&g, &pat, &PropagationOptions::new(15, 1), 42).unwrap();
        let mut sim = Simulation::new(&g, substream(42, 0)).unwrap();
        for _ in 0..15 {
            sim.step().unwrap();
        }
        let m = res.epochs[15][1].mean;
        assert_eq!(m, sim.states()[1][0]);
    }

    #[test]
    fn propagation_is_deterministic() {
        let g = chain(2);
        let pat = pattern_for(&g, "dst", FiringState::new(5.0, 0.0), 4.0);
        let opts = PropagationOptions::new(20, 32);
        let a = propagation_experiment(&g, &pat, &opts, 9).unwrap();
        let b = propagation_experiment(&g, &pat, &opts, 9).unwrap();
        assert_eq!(a, b);
        for e in &a.epochs {
            let o = e[1].overlap.unwrap();
            assert!((0.0..=1.0).contains(&o));
            assert!(e[0].overlap.is_none());
            let c = e[1].covariance;
            assert!(c[0][0] >= 0.0 && c[1][1] >= 0.0 && c[0][1] * c[0][1] <= c[0][0] * c[1][1] + 1e-12);
        }
    }

    #[test]
    fn action_prefers_generator() {
        let p = center_background(&stm_params(), FiringState::ORIGIN).unwrap();
        let g = PopulationGraph {
            regions: vec![Region {
                id: "a".into(),
                columns: vec![Column { params: p.clone(), state: FiringState::ORIGIN }],
                lattice: None,
            }],
            connections: vec![],
            drives: vec![],
        };
        let mut sim = Simulation::new(&g, seeded(3)).unwrap();
        let mut traj = vec![sim.states()[0][0]];
        for _ in 0..500 {
            sim.step().unwrap();
            traj.push(sim.states()[0][0]);
        }
        let base = effective_action_cost(&p, &traj).unwrap();
        let mut rng = seeded(11);
        let mut wins = 0;
        for _ in 0..100 {
            let mut q = p.clone();
            for g in 0..2 {
                q.threshold[g] *= 1.0 + rng.random_range(-0.1..0.1);
                q.background[g][0] *= 1.0 + rng.random_range(-0.1..0.1);
            }
            if effective_action_cost(&q, &traj).unwrap() > base {
                wins += 1;
            }
        }
        assert!(wins >= 95, "{wins}");
    }

    #[test]
    fn trajectory_fit_recovers_drift() {
        let p = center_background(&stm_params(), FiringState::ORIGIN).unwrap();
        let region = Region {
            id: "a".into(),
            columns: vec![Column { params: p.clone(), state: FiringState::ORIGIN }],
            lattice: None,
        };
        let g = PopulationGraph { regions: vec![region], connections: vec![], drives: vec![] };
        let mut sim = Simulation::new(&g, seeded(21)).unwrap();
        let mut traj = vec![sim.states()[0][0]];
        for _ in 0..5000 {
            sim.step().unwrap();
            traj.push(sim.states()[0][0]);
        }
        let mut start = g.clone();
        start.regions[0].columns[0].params.threshold = [7.0, 13.0];
        let free = vec![
            FreeParamSpec { param: FreeParam::Threshold { pop: Pop::Excitatory }, lo: 5.0, hi: 15.0 },
            FreeParamSpec { param: FreeParam::Threshold { pop: Pop::Inhibitory }, lo: 5.0, hi: 15.0 },
        ];
        let data = FitData::Trajectories(BTreeMap::from([("a".to_string(), vec![traj])]));
        let sched = AnnealSchedule::uniform(2, 1.0, 1.0, 3000);
        let fit = fit_idea(&start, &["a".to_string()], &data, &free, &sched, 5).unwrap();
        let fitted = &fit.columns[0].2;
        let mut rng = seeded(2);
        for _ in 0..10 {
            let s = FiringState::new(rng.random_range(-20.0..20.0), rng.random_range(-10.0..10.0));
            let a = local_dynamics(s, &p).unwrap().drift;
            let b = local_dynamics(s, fitted).unwrap().drift;
            for gi in 0..2 {
                assert!((a[gi] - b[gi]).abs() <= 0.1 * a[gi].abs().max(1.0), "{s:?} {a:?} {b:?}");
            }
        }
        let again = fit_idea(&start, &["a".to_string()], &data, &free, &sched, 5).unwrap();
        assert_eq!(again.values, fit.values);
    }

    #[test]
    fn pattern_fit_at_origin_keeps_shift_small() {
        let p = long_params();
        let g = PopulationGraph { regions: vec![region("a", &p, 1)], connections: vec![], drives: vec![] };
        let pat = pattern_for(&g, "a", FiringState::ORIGIN, 6.0);
        let free =
            vec![FreeParamSpec { param: FreeParam::BackgroundShift { pop: Pop::Excitatory }, lo: -0.2, hi: 0.2 }];
        let data = FitData::Pattern { pattern: pat, epochs: 10, ensemble: 64 };
        let sched = AnnealSchedule::uniform(1, 1.0, 1.0, 150);
        let fit = fit_idea(&g, &["a".to_string()], &data, &free, &sched, 1).unwrap();
        assert!(fit.values[0].abs() < 0.05, "{:?}", fit.values);
    }
}
