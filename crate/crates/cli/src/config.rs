//! Scenario files: TOML, closed schema, named parameter sets.
//!
//! Every section is optional at parse time; each subcommand demands the ones
//! it reads. Relative paths inside a scenario resolve against the file's
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ism_core::asa::AnnealSchedule;
use ism_core::pathint::{Axis, Bandwidth, OrnsteinUhlenbeck, TroughSpec};
use ism_core::population::{
    Column, Connection, ExogenousDrive, FreeParamSpec, IdeaPattern, OverlapGrid, PopulationGraph, Region, RegionId,
};
use ism_core::risk::{Binning, ExposureProblem, FreeExposure, Objective, PortfolioSpec};
use ism_core::smni::{center_background, ColumnParams, FiringState};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub param_sets: BTreeMap<String, ColumnParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<PopulationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propagate: Option<PropagateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evolve: Option<EvolveConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<RiskConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<CenterConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnConfig {
    /// Name of an entry in `param_sets`.
    pub params: String,
    #[serde(default)]
    pub state: FiringState,
    /// Re-center the background efficacies at this state before use.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_at: Option<FiringState>,
    /// Identical copies of this column.
    #[serde(default = "one_usize")]
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionConfig {
    pub id: RegionId,
    pub columns: Vec<ColumnConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub regions: Vec<RegionConfig>,
    #[serde(default)]
    pub connections: Vec<Connection>,
    #[serde(default)]
    pub drives: Vec<ExogenousDrive>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<IdeaPattern>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagateConfig {
    pub epochs: usize,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    #[serde(default)]
    pub seeded: Vec<RegionId>,
    #[serde(default)]
    pub overlap_grid: OverlapGrid,
    #[serde(default = "one_f64")]
    pub noise_scale: f64,
}

/// Scalar annealing settings broadcast over every free parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "one_f64")]
    pub t0: f64,
    #[serde(default = "one_f64")]
    pub c: f64,
    /// Defaults to `c`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_accept: Option<f64>,
    /// Defaults to `|cost|` at the first point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0_accept: Option<f64>,
    pub budget: usize,
    #[serde(default)]
    pub reanneal_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_cost: Option<f64>,
}

impl ScheduleConfig {
    pub fn build(&self, dim: usize) -> AnnealSchedule {
        AnnealSchedule {
            t0: vec![self.t0; dim],
            c: vec![self.c; dim],
            t0_accept: self.t0_accept,
            c_accept: self.c_accept.unwrap_or(self.c),
            budget: self.budget,
            reanneal_every: self.reanneal_every,
            target_cost: self.target_cost,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FitDataConfig {
    /// CSV with header `region,column,epoch,m_e,m_i`.
    Trajectories { file: PathBuf },
    /// Residency in `population.pattern` under a fixed-seed ensemble.
    Pattern {
        epochs: usize,
        #[serde(default = "default_fit_ensemble")]
        ensemble: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub subset: Vec<RegionId>,
    pub free: Vec<FreeParamSpec>,
    pub data: FitDataConfig,
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsConfig {
    Ou(OrnsteinUhlenbeck),
    Column {
        params: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center_at: Option<FiringState>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Gaussian { mean: Vec<f64>, sd: Vec<f64> },
    Delta { at: Vec<f64> },
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveConfig {
    pub dynamics: DynamicsConfig,
    /// Explicit mesh; column dynamics fall back to the firing box at `spacing`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axes: Option<Vec<Axis>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 2]>,
    pub dt: f64,
    pub steps: usize,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: Bandwidth,
    pub initial: InitialConfig,
    /// Write moments every this many steps (step 0 always included).
    #[serde(default = "one_usize")]
    pub record_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trough: Option<TroughSpec>,
}

/// Exposure search; the VaR level is the one in `[risk]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureConfig {
    pub free: Vec<FreeExposure>,
    #[serde(default = "default_q_target")]
    pub q_target: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub objective: Objective,
    pub schedule: ScheduleConfig,
}

impl ExposureConfig {
    pub fn problem(&self, var_level: f64) -> ExposureProblem {
        ExposureProblem {
            free: self.free.clone(),
            var_level,
            q_target: self.q_target,
            lambda: self.lambda,
            objective: self.objective,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    /// CSV of per-epoch returns, one column per variable, header required.
    pub returns: PathBuf,
    /// Trailing window for the marginal fits; whole series when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default)]
    pub asymmetric: bool,
    #[serde(default)]
    pub preaverage: bool,
    pub var_level: f64,
    pub events: usize,
    #[serde(default)]
    pub binning: Binning,
    pub portfolio: PortfolioSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure: Option<ExposureConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostConfig {
    /// `Σ ((x_i − center_i) / scale_i)²`
    Quadratic { center: Vec<f64>, scale: Vec<f64> },
    /// `Σ x² + 1 − cos 2πx`
    CosineBowl,
    /// Short-time action from `from` to the sampled `(M^E, M^I)`.
    TransitionAction { params: String, from: FiringState },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub cost: CostConfig,
    pub bounds: Vec<[f64; 2]>,
    pub n: usize,
    pub schedule: ScheduleConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenterConfig {
    pub params: String,
    #[serde(default)]
    pub target: FiringState,
}

fn one_usize() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

fn default_ensemble() -> usize {
    ism_core::population::DEFAULT_ENSEMBLE
}

fn default_fit_ensemble() -> usize {
    32
}

fn default_q_target() -> f64 {
    0.01
}

fn default_lambda() -> f64 {
    10.0
}

fn default_bandwidth() -> Bandwidth {
    Bandwidth::Sigmas(6.0)
}

/// A parsed scenario plus the exact bytes it came from.
#[derive(Clone, Debug)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub path: PathBuf,
    pub text: String,
}

impl LoadedScenario {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

/// Read, parse and validate a scenario. Parse errors carry line and column.
pub fn load_scenario(path: &Path) -> Result<LoadedScenario, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
    let scenario = parse_scenario(&text).map_err(|e| CliError::parse(format!("{}: {}", path.display(), e.message)))?;
    let errors = scenario.validate();
    if !errors.is_empty() {
        return Err(CliError::validation(format!("{}: {}", path.display(), errors.join("; "))));
    }
    Ok(LoadedScenario { scenario, path: path.to_path_buf(), text })
}

pub fn parse_scenario(text: &str) -> Result<Scenario, CliError> {
    toml::from_str(text).map_err(|e| {
        let at = e
            .span()
            .map(|s| {
                let (line, col) = line_col(text, s.start);
                format!("line {line}, column {col}: ")
            })
            .unwrap_or_default();
        CliError::parse(format!("{at}{}", e.message()))
    })
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

impl Scenario {
    pub fn param_set(&self, name: &str) -> Result<&ColumnParams, CliError> {
        self.param_sets.get(name).ok_or_else(|| CliError::validation(format!("unknown param set `{name}`")))
    }

    /// Cross-reference checks; one message per problem found.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        for (name, p) in &self.param_sets {
            if let Err(e) = p.validate() {
                errors.push(format!("param set `{name}`: {e}"));
            }
        }
        let check_set = |name: &str, ctx: &str, errors: &mut Vec<String>| {
            if !self.param_sets.contains_key(name) {
                errors.push(format!("{ctx}: unknown param set `{name}`"));
            }
        };
        if let Some(pop) = &self.population {
            for r in &pop.regions {
                for c in &r.columns {
                    check_set(&c.params, &format!("region `{}`", r.id), &mut errors);
                    if c.count == 0 {
                        errors.push(format!("region `{}`: column count must be at least 1", r.id));
                    }
                }
            }
            if errors.is_empty() {
                match self.population_graph() {
                    Ok(g) => {
                        if let Err(e) = g.validate() {
                            errors.push(e.to_string());
                        } else if let Some(p) = &pop.pattern {
                            if let Err(e) = p.validate(&g) {
                                errors.push(e.to_string());
                            }
                        }
                    }
                    Err(e) => errors.push(e.message),
                }
            }
        }
        if let Some(fit) = &self.fit {
            if let Some(pop) = &self.population {
                for id in &fit.subset {
                    if !pop.regions.iter().any(|r| &r.id == id) {
                        errors.push(format!("fit subset names unknown region `{id}`"));
                    }
                }
            }
        }
        if let Some(ev) = &self.evolve {
            if let DynamicsConfig::Column { params, .. } = &ev.dynamics {
                check_set(params, "evolve.dynamics", &mut errors);
            }
        }
        if let Some(s) = &self.sample {
            if let CostConfig::TransitionAction { params, .. } = &s.cost {
                check_set(params, "sample.cost", &mut errors);
            }
        }
        if let Some(c) = &self.center {
            check_set(&c.params, "center", &mut errors);
        }
        errors
    }

    pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        section.as_ref().ok_or_else(|| CliError::validation(format!("this subcommand needs a [{name}] section")))
    }

    /// Column parameters with optional re-centering applied.
    pub fn column_params(&self, name: &str, center_at: Option<FiringState>) -> Result<ColumnParams, CliError> {
        let p = self.param_set(name)?;
        match center_at {
            Some(t) => Ok(center_background(p, t)?),
            None => Ok(p.clone()),
        }
    }

    pub fn population_graph(&self) -> Result<PopulationGraph, CliError> {
        let pop = Self::require(&self.population, "population")?;
        let mut regions = Vec::with_capacity(pop.regions.len());
        for r in &pop.regions {
            let mut columns = Vec::new();
            for c in &r.columns {
                let params = self.column_params(&c.params, c.center_at)?;
                for _ in 0..c.count {
                    columns.push(Column { params: params.clone(), state: c.state });
                }
            }
            regions.push(Region { id: r.id.clone(), columns, lattice: r.lattice.clone() });
        }
        Ok(PopulationGraph { regions, connections: pop.connections.clone(), drives: pop.drives.clone() })
    }
}
