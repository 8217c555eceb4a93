//! Subcommand orchestration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

use ism_core::asa::{self, write_trace_csv, Bounds};
use ism_core::pathint::{
    build_kernel, evolve_observed, stationary_scan, Axis, ColumnDynamics, Dynamics, Grid, GridDistribution,
};
use ism_core::population::{fit_idea, propagation_experiment, FitData, FreeParam, PropagationOptions};
use ism_core::risk::marginal::to_gaussian_flagged;
use ism_core::risk::{
    build_portfolio_distribution, estimate_correlation, fit_marginal, fit_marginal_asymmetric, optimize_exposures,
    portfolio_returns, risk_report, sample_events, MarginalModel, RiskReport,
};
use ism_core::smni::{
    center_background_with_shift, local_dynamics, threshold_factor, transition_action, FiringState, Pop,
};

use crate::config::{CostConfig, DynamicsConfig, FitDataConfig, InitialConfig, LoadedScenario, Scenario};
use crate::error::CliError;
use crate::output::{csv_err, csv_writer, sha256_hex, OutputDir, OutputRecord};
use crate::seeds;

pub const ENV_OUT_DIR: &str = "ISM_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "ism-out";
pub const CONFIG_COPY: &str = "scenario.toml";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    FitIdea,
    Propagate,
    Evolve,
    Risk,
    Sample,
    Center,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::FitIdea => "fit-idea",
            Subcommand::Propagate => "propagate",
            Subcommand::Evolve => "evolve",
            Subcommand::Risk => "risk",
            Subcommand::Sample => "sample",
            Subcommand::Center => "center",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quiet: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_file: String,
    pub config_sha256: String,
    pub seed: u64,
    pub seed_streams: BTreeMap<String, u64>,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<OutputRecord>,
    pub warnings: Vec<String>,
    /// The scenario after defaults were applied and `--seed` overrides taken.
    pub resolved_config: serde_json::Value,
}

/// What a subcommand hands back besides its files.
#[derive(Default)]
struct Produced {
    streams: Vec<&'static str>,
    warnings: Vec<String>,
    summary: Vec<String>,
}

fn now() -> String {
    OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_default()
}

/// Output directory: `--out`, then the scenario's `output_dir`, then
/// `$ISM_OUT_DIR`, then `./ism-out`.
pub fn output_dir(loaded: &LoadedScenario, opts: &RunOptions) -> PathBuf {
    if let Some(o) = &opts.out {
        return o.clone();
    }
    if let Some(o) = &loaded.scenario.output_dir {
        return loaded.resolve(o);
    }
    match std::env::var_os(ENV_OUT_DIR) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUT_DIR),
    }
}

/// Run one subcommand; outputs are removed again if it fails.
pub fn run(cmd: Subcommand, loaded: &LoadedScenario, opts: &RunOptions) -> Result<RunManifest, CliError> {
    let started_at = now();
    let mut loaded = loaded.clone();
    if let Some(s) = opts.seed {
        loaded.scenario.seed = s;
    }
    let seed = loaded.scenario.seed;
    let mut out = OutputDir::create(&output_dir(&loaded, opts))?;
    out.write_bytes(CONFIG_COPY, loaded.text.as_bytes())?;

    let produced = match cmd {
        Subcommand::Center => run_center(&loaded.scenario, &mut out),
        Subcommand::Propagate => run_propagate(&loaded.scenario, &mut out),
        Subcommand::FitIdea => run_fit(&loaded, &mut out),
        Subcommand::Evolve => run_evolve(&loaded.scenario, &mut out),
        Subcommand::Risk => run_risk(&loaded, &mut out),
        Subcommand::Sample => run_sample(&loaded.scenario, &mut out),
    }?;

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: cmd.name().to_string(),
        config_file: CONFIG_COPY.to_string(),
        config_sha256: sha256_hex(loaded.text.as_bytes()),
        seed,
        seed_streams: produced.streams.iter().map(|n| (n.to_string(), seeds::derive(seed, n))).collect(),
        started_at,
        finished_at: now(),
        outputs: out.records().to_vec(),
        warnings: produced.warnings,
        resolved_config: serde_json::to_value(&loaded.scenario)
            .map_err(|e| CliError::new(crate::error::Category::Io, e.to_string()))?,
    };
    let json =
        serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::new(crate::error::Category::Io, e.to_string()))?;
    out.write_bytes(MANIFEST, &json)?;
    let dir = out.path().to_path_buf();
    out.commit();
    if !opts.quiet {
        // Outputs are committed; a closed stdout (e.g. piped into `head`) is not a failure.
        let mut so = std::io::stdout().lock();
        let _ = (|| -> std::io::Result<()> {
            for line in &produced.summary {
                writeln!(so, "{line}")?;
            }
            for w in &manifest.warnings {
                writeln!(so, "warning: {w}")?;
            }
            writeln!(so, "wrote {} files to {}", manifest.outputs.len() + 1, dir.display())
        })();
    }
    Ok(manifest)
}

fn write_rows(out: &mut OutputDir, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    out.write(name, |buf| {
        let mut w = csv_writer(buf);
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()
    })
}

fn strs<const N: usize>(h: [&str; N]) -> Vec<String> {
    h.iter().map(|s| s.to_string()).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn run_center(sc: &Scenario, out: &mut OutputDir) -> Result<Produced, CliError> {
    let cfg = Scenario::require(&sc.center, "center")?;
    let base = sc.param_set(&cfg.params)?;
    let before = threshold_factor(cfg.target, base)?;
    let c = center_background_with_shift(base, cfg.target)?;
    let after = threshold_factor(cfg.target, &c.params)?;
    let drift = local_dynamics(cfg.target, &c.params)?.drift;
    let rows: Vec<Vec<String>> = Pop::ALL
        .iter()
        .map(|p| {
            let g = p.index();
            vec![
                p.to_string(),
                c.shift[g].to_string(),
                c.params.background[g][0].to_string(),
                c.params.background[g][1].to_string(),
                before[g].to_string(),
                after[g].to_string(),
                (drift[g] + 0.0).to_string(),
            ]
        })
        .collect();
    let header =
        strs(["pop", "shift", "background_e", "background_i", "threshold_factor_before", "threshold_factor", "drift"]);
    write_rows(out, "center.csv", &header, &rows)?;
    Ok(Produced {
        summary: vec![format!(
            "centered `{}`: F = [{:e}, {:e}], drift = [{:e}, {:e}]",
            cfg.params,
            after[0] + 0.0,
            after[1] + 0.0,
            drift[0] + 0.0,
            drift[1] + 0.0
        )],
        ..Default::default()
    })
}

fn run_propagate(sc: &Scenario, out: &mut OutputDir) -> Result<Produced, CliError> {
    let cfg = Scenario::require(&sc.propagate, "propagate")?;
    let graph = sc.population_graph()?;
    let pattern = Scenario::require(&Scenario::require(&sc.population, "population")?.pattern, "population.pattern")?;
    let opts = PropagationOptions {
        epochs: cfg.epochs,
        ensemble: cfg.ensemble,
        seeded: cfg.seeded.clone(),
        overlap_grid: cfg.overlap_grid.clone(),
        noise_scale: cfg.noise_scale,
    };
    let res = propagation_experiment(&graph, pattern, &opts, seeds::derive(sc.seed, seeds::POPULATION))?;
    let mut rows = Vec::new();
    for (k, snaps) in res.epochs.iter().enumerate() {
        for (id, s) in res.regions.iter().zip(snaps) {
            rows.push(vec![
                k.to_string(),
                id.clone(),
                s.mean.m_e.to_string(),
                s.mean.m_i.to_string(),
                s.covariance[0][0].to_string(),
                s.covariance[0][1].to_string(),
                s.covariance[1][1].to_string(),
                opt(s.overlap),
            ]);
        }
    }
    let header = strs(["epoch", "region", "mean_m_e", "mean_m_i", "cov_ee", "cov_ei", "cov_ii", "overlap"]);
    write_rows(out, "propagation.csv", &header, &rows)?;
    let summary = pattern
        .targets
        .keys()
        .filter_map(|id| {
            let s = res.overlap_series(id)?;
            Some(format!("{id}: overlap {:.4} -> {:.4}", s.first()?, s.last()?))
        })
        .collect();
    Ok(Produced { streams: vec![seeds::POPULATION], summary, ..Default::default() })
}

fn free_label(p: &FreeParam) -> String {
    match p {
        FreeParam::Threshold { pop } => format!("threshold[{pop}]"),
        FreeParam::Efficacy { pop, from } => format!("efficacy[{pop}][{from}]"),
        FreeParam::Background { pop, from } => format!("background[{pop}][{from}]"),
        FreeParam::BackgroundShift { pop } => format!("background_shift[{pop}]"),
        FreeParam::PolMean { pop, from } => format!("pol_mean[{pop}][{from}]"),
    }
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRow {
    region: String,
    column: usize,
    epoch: usize,
    m_e: f64,
    m_i: f64,
}

/// `region,column,epoch,m_e,m_i` rows into per-column trajectories ordered by epoch.
pub fn read_trajectories(path: &Path) -> Result<BTreeMap<String, Vec<Vec<FiringState>>>, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::read(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let mut cells: BTreeMap<String, BTreeMap<usize, BTreeMap<usize, FiringState>>> = BTreeMap::new();
    for (i, rec) in rdr.deserialize::<TrajectoryRow>().enumerate() {
        let r = rec.map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
        let prev = cells
            .entry(r.region.clone())
            .or_default()
            .entry(r.column)
            .or_default()
            .insert(r.epoch, FiringState::new(r.m_e, r.m_i));
        if prev.is_some() {
            return Err(CliError::validation(format!(
                "{}: row {}: duplicate epoch {}",
                path.display(),
                i + 2,
                r.epoch
            )));
        }
    }
    let mut map = BTreeMap::new();
    for (region, cols) in cells {
        let mut trs = Vec::new();
        for (j, (c, epochs)) in cols.into_iter().enumerate() {
            if c != j {
                return Err(CliError::validation(format!("{}: region `{region}` skips column {j}", path.display())));
            }
            let first = *epochs.keys().next().expect("nonempty");
            if epochs.keys().enumerate().any(|(k, e)| *e != first + k) {
                return Err(CliError::validation(format!(
                    "{}: region `{region}` column {c} has gaps in epochs",
                    path.display()
                )));
            }
            trs.push(epochs.into_values().collect());
        }
        map.insert(region, trs);
    }
    Ok(map)
}

fn run_fit(loaded: &LoadedScenario, out: &mut OutputDir) -> Result<Produced, CliError> {
    let sc = &loaded.scenario;
    let cfg = Scenario::require(&sc.fit, "fit")?;
    let graph = sc.population_graph()?;
    let data = match &cfg.data {
        FitDataConfig::Trajectories { file } => FitData::Trajectories(read_trajectories(&loaded.resolve(file))?),
        FitDataConfig::Pattern { epochs, ensemble } => {
            let pattern =
                Scenario::require(&Scenario::require(&sc.population, "population")?.pattern, "population.pattern")?;
            FitData::Pattern { pattern: pattern.clone(), epochs: *epochs, ensemble: *ensemble }
        }
    };
    let schedule = cfg.schedule.build(cfg.free.len());
    let res = fit_idea(&graph, &cfg.subset, &data, &cfg.free, &schedule, seeds::derive(sc.seed, seeds::ASA))?;

    let rows: Vec<Vec<String>> = cfg
        .free
        .iter()
        .zip(&res.values)
        .map(|(f, v)| vec![free_label(&f.param), f.lo.to_string(), f.hi.to_string(), v.to_string()])
        .collect();
    write_rows(out, "fit.csv", &strs(["param", "lo", "hi", "value"]), &rows)?;
    let summary_row = vec![res.cost.to_string(), res.evals.to_string(), res.budget_exhausted.to_string()];
    write_rows(out, "fit_summary.csv", &strs(["cost", "evals", "budget_exhausted"]), &[summary_row])?;
    out.write("fit_trace.csv", |buf| write_trace_csv(&res.trace, buf))?;

    let mut warnings = Vec::new();
    if res.budget_exhausted && cfg.schedule.target_cost.is_some() {
        warnings.push("fit stopped at the evaluation budget before reaching target_cost".into());
    }
    Ok(Produced {
        streams: vec![seeds::ASA],
        warnings,
        summary: vec![format!("fit cost {} after {} evaluations", res.cost, res.evals)],
    })
}

fn run_evolve(sc: &Scenario, out: &mut OutputDir) -> Result<Produced, CliError> {
    let cfg = Scenario::require(&sc.evolve, "evolve")?;
    if cfg.record_every == 0 {
        return Err(CliError::validation("evolve.record_every must be at least 1"));
    }
    let (dynamics, grid): (Box<dyn Dynamics>, Grid) = match &cfg.dynamics {
        DynamicsConfig::Ou(ou) => {
            let axes = cfg.axes.clone().ok_or_else(|| CliError::validation("ou dynamics need evolve.axes"))?;
            (Box::new(ou.clone()), Grid::new(axes)?)
        }
        DynamicsConfig::Column { params, center_at } => {
            let p = sc.column_params(params, *center_at)?;
            let grid = match &cfg.axes {
                Some(axes) => Grid::new(axes.clone())?,
                None => Grid::firing_space(&p, cfg.spacing.unwrap_or([1.0, 1.0]))?,
            };
            (Box::new(ColumnDynamics { params: p }), grid)
        }
    };
    let kernel = build_kernel(dynamics.as_ref(), &grid, cfg.dt, &cfg.bandwidth)?;
    let init = match &cfg.initial {
        InitialConfig::Gaussian { mean, sd } => GridDistribution::gaussian(grid.clone(), mean, sd)?,
        InitialConfig::Delta { at } => {
            if at.len() != grid.dim() {
                return Err(CliError::validation("evolve.initial.at must match the grid dimension"));
            }
            GridDistribution::delta(grid.clone(), at)
        }
        InitialConfig::Uniform => GridDistribution::new(grid.clone(), vec![1.0; grid.cells()])?,
    };

    let labels: Vec<String> = grid.axes().iter().map(|a: &Axis| a.label.clone()).collect();
    let dim = grid.dim();
    let mut header = strs(["step", "t"]);
    header.extend(labels.iter().map(|l| format!("mean_{l}")));
    for i in 0..dim {
        for j in i..dim {
            header.push(format!("cov_{}_{}", labels[i], labels[j]));
        }
    }
    header.push("raw_mass".into());
    let ou = match &cfg.dynamics {
        DynamicsConfig::Ou(ou) => Some(ou.clone()),
        _ => None,
    };
    if ou.is_some() {
        header.extend(strs(["analytic_mean", "analytic_var"]));
    }
    let (m0, v0) = (init.mean(), init.covariance());
    let moment_row = |step: usize, d: &GridDistribution, raw: Option<f64>| {
        let t = step as f64 * cfg.dt;
        let mut row = vec![step.to_string(), t.to_string()];
        row.extend(d.mean().iter().map(|x| x.to_string()));
        let c = d.covariance();
        for i in 0..dim {
            for j in i..dim {
                row.push(c[i][j].to_string());
            }
        }
        row.push(opt(raw));
        if let Some(ou) = &ou {
            row.push(ou.mean_at(m0[0], t).to_string());
            row.push(ou.variance_at(v0[0][0], t).to_string());
        }
        row
    };

    let mut rows = vec![moment_row(0, &init, None)];
    let mut recorded = Vec::new();
    let (fin, report) = evolve_observed(&init, &kernel, cfg.steps, |step, d| {
        if step % cfg.record_every == 0 || step == cfg.steps {
            recorded.push(step);
            rows.push(moment_row(step, d, None));
        }
    })?;
    let raw_col = header.iter().position(|h| h == "raw_mass").expect("header has raw_mass");
    for (row, step) in rows[1..].iter_mut().zip(recorded) {
        row[raw_col] = report.raw_mass[step - 1].to_string();
    }
    write_rows(out, "moments.csv", &header, &rows)?;
    out.write("density.csv", |buf| fin.write_csv(buf))?;

    let mut summary = vec![format!("evolved {} steps on {} cells", cfg.steps, grid.cells())];
    if let Some(trough) = &cfg.trough {
        let maxima = stationary_scan(&fin, trough)?;
        let mut mh = strs(["along"]);
        mh.extend(labels.iter().map(|l| format!("cell_{l}")));
        mh.extend(labels.iter().map(|l| l.to_string()));
        mh.push("weight".into());
        let mrows: Vec<Vec<String>> = maxima
            .iter()
            .map(|m| {
                let mut r = vec![m.along.to_string()];
                r.extend(m.cell.iter().map(|c| c.to_string()));
                r.extend(m.position.iter().map(|x| x.to_string()));
                r.push(m.weight.to_string());
                r
            })
            .collect();
        write_rows(out, "maxima.csv", &mh, &mrows)?;
        summary.push(format!("{} local maxima along the trough", maxima.len()));
    }
    let stats = kernel.stats();
    let mut warnings = Vec::new();
    if stats.mean_leakage > 1e-3 {
        warnings.push(format!(
            "kernel rows lose {:.3e} of their mass on average (up to {:.3e}) to the band or grid edge",
            stats.mean_leakage, stats.max_leakage
        ));
    }
    Ok(Produced { warnings, summary, ..Default::default() })
}

/// Per-epoch returns with a header naming each variable.
pub fn read_returns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::read(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes.as_slice());
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::parse(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::parse(format!("{}: line {}: {e}", path.display(), i + 2)))?;
        if row.iter().any(|x| !x.is_finite()) {
            return Err(CliError::validation(format!("{}: line {}: non-finite return", path.display(), i + 2)));
        }
        rows.push(row);
    }
    if names.is_empty() || rows.len() < 2 {
        return Err(CliError::validation(format!("{}: need a header and at least two rows", path.display())));
    }
    Ok((names, rows))
}

fn report_header() -> Vec<String> {
    strs(["q", "var_level", "etl", "q_closed_form", "q_empirical", "tail_events", "m_m", "x_width"])
}

fn report_row(r: &RiskReport) -> Vec<String> {
    vec![
        r.q.to_string(),
        r.var_level.to_string(),
        opt(r.etl),
        r.q_closed_form.to_string(),
        r.q_empirical.to_string(),
        r.tail_events.to_string(),
        r.m_m.to_string(),
        r.x_width.to_string(),
    ]
}

fn run_risk(loaded: &LoadedScenario, out: &mut OutputDir) -> Result<Produced, CliError> {
    let sc = &loaded.scenario;
    let cfg = Scenario::require(&sc.risk, "risk")?;
    let (names, rows) = read_returns(&loaded.resolve(&cfg.returns))?;
    let n = names.len();
    if cfg.portfolio.dim() != n {
        return Err(CliError::validation(format!(
            "portfolio has {} variables but the returns file has {n}",
            cfg.portfolio.dim()
        )));
    }
    let mut warnings = Vec::new();
    let marginals: Vec<MarginalModel> = (0..n)
        .map(|j| {
            let series: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            if cfg.asymmetric {
                fit_marginal_asymmetric(&series, cfg.window)
            } else {
                fit_marginal(&series, cfg.window)
            }
        })
        .collect::<Result<_, _>>()?;
    let used = cfg.window.unwrap_or(rows.len());
    let mut saturated = 0usize;
    let dy: Vec<Vec<f64>> = rows[rows.len() - used..]
        .iter()
        .map(|r| {
            r.iter()
                .zip(&marginals)
                .map(|(x, m)| {
                    let t = to_gaussian_flagged(m, *x);
                    saturated += t.saturated as usize;
                    t.value
                })
                .collect()
        })
        .collect();
    if saturated > 0 {
        warnings.push(format!("{saturated} transformed returns hit the Gaussian saturation clamp"));
    }
    let est = estimate_correlation(&dy, cfg.preaverage)?;
    warnings.extend(est.warnings.iter().cloned());

    let events = sample_events(&est.model, &marginals, cfg.events, seeds::derive(sc.seed, seeds::EVENTS))?;
    let sat_events = events.iter().filter(|e| e.saturated).count();
    if sat_events > 0 {
        warnings.push(format!("{sat_events} sampled events were clamped in the inverse transform"));
    }
    let returns = portfolio_returns(&cfg.portfolio, &events)?;
    let dist = build_portfolio_distribution(returns, &cfg.binning)?;
    let report = risk_report(&dist, cfg.var_level, cfg.asymmetric)?;

    let mrows: Vec<Vec<String>> = names
        .iter()
        .zip(&marginals)
        .map(|(name, m)| vec![name.clone(), m.m.to_string(), m.chi.to_string(), opt(m.chi_minus), opt(m.chi_plus)])
        .collect();
    write_rows(out, "marginals.csv", &strs(["variable", "m", "chi", "chi_minus", "chi_plus"]), &mrows)?;
    let mut ch = strs(["variable"]);
    ch.extend(names.iter().cloned());
    let crows: Vec<Vec<String>> = names
        .iter()
        .zip(est.model.corr_rows())
        .map(|(name, r)| std::iter::once(name.clone()).chain(r.iter().map(|x| x.to_string())).collect())
        .collect();
    write_rows(out, "correlation.csv", &ch, &crows)?;
    out.write("bins.csv", |buf| dist.write_bins_csv(buf))?;
    write_rows(out, "report.csv", &report_header(), &[report_row(&report)])?;

    let mut streams = vec![seeds::EVENTS];
    let mut summary = vec![format!(
        "Q = {:.6} (closed form), {:.6} (empirical) at VaR {}",
        report.q_closed_form, report.q_empirical, report.var_level
    )];
    if let Some(ex) = &cfg.exposure {
        let problem = ex.problem(cfg.var_level);
        let schedule = ex.schedule.build(problem.free.len());
        let res = optimize_exposures(&cfg.portfolio, &problem, &events, &schedule, seeds::derive(sc.seed, seeds::ASA))?;
        streams.push(seeds::ASA);
        let xrows: Vec<Vec<String>> = problem
            .free
            .iter()
            .zip(&res.values)
            .map(|(f, v)| vec![f.index.to_string(), names[f.index].clone(), v.to_string()])
            .collect();
        write_rows(out, "exposure.csv", &strs(["index", "variable", "value"]), &xrows)?;
        let mut h = report_header();
        h.extend(strs(["cost", "evals", "budget_exhausted", "constraint_infeasible", "ties"]));
        let ties: Vec<String> = res.ties.iter().map(|(i, j)| format!("{i}-{j}")).collect();
        let mut row = report_row(&res.report);
        row.extend([
            res.cost.to_string(),
            res.evals.to_string(),
            res.budget_exhausted.to_string(),
            res.constraint_infeasible.to_string(),
            ties.join(" "),
        ]);
        write_rows(out, "exposure_report.csv", &h, &[row])?;
        if res.constraint_infeasible {
            warnings.push(format!(
                "exposure search ended with Q = {} away from target {}",
                res.report.q_closed_form, problem.q_target
            ));
        }
        if !res.ties.is_empty() {
            warnings.push(format!("exposures are tied along pairs {}", ties.join(" ")));
        }
        summary.push(format!("optimized exposures {:?}: Q = {:.6}", res.values, res.report.q_closed_form));
    }
    Ok(Produced { streams, warnings, summary })
}

fn run_sample(sc: &Scenario, out: &mut OutputDir) -> Result<Produced, CliError> {
    let cfg = Scenario::require(&sc.sample, "sample")?;
    let bounds = Bounds::new(cfg.bounds.iter().map(|b| (b[0], b[1])).collect())?;
    let dim = bounds.dim();
    let cost: Box<dyn Fn(&[f64]) -> f64> = match &cfg.cost {
        CostConfig::Quadratic { center, scale } => {
            if center.len() != dim || scale.len() != dim || scale.iter().any(|s| !(*s > 0.0)) {
                return Err(CliError::validation("quadratic cost needs center and positive scale per bound"));
            }
            let (center, scale) = (center.clone(), scale.clone());
            Box::new(move |x: &[f64]| x.iter().zip(&center).zip(&scale).map(|((x, c), s)| ((x - c) / s).powi(2)).sum())
        }
        CostConfig::CosineBowl => {
            Box::new(|x: &[f64]| x.iter().map(|v| v * v + 1.0 - (2.0 * std::f64::consts::PI * v).cos()).sum())
        }
        CostConfig::TransitionAction { params, from } => {
            if dim != 2 {
                return Err(CliError::validation("transition_action cost samples (M^E, M^I): needs 2 bounds"));
            }
            let p = sc.param_set(params)?.clone();
            let from = *from;
            transition_action(from, from, &p, None)?;
            Box::new(move |x: &[f64]| {
                transition_action(from, FiringState::new(x[0], x[1]), &p, None).unwrap_or(f64::INFINITY)
            })
        }
    };
    let schedule = cfg.schedule.build(dim);
    let samples = asa::sample(&cost, &bounds, &schedule, cfg.n, seeds::derive(sc.seed, seeds::ASA))?;
    let mut header = strs(["step"]);
    header.extend((0..dim).map(|i| format!("x{i}")));
    header.push("cost".into());
    header.extend((0..dim).map(|i| format!("temperature{i}")));
    header.push("accepted".into());
    let rows: Vec<Vec<String>> = samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let mut r = vec![(k + 1).to_string()];
            r.extend(s.point.iter().map(|x| x.to_string()));
            r.push(s.cost.to_string());
            r.extend(s.temperatures.iter().map(|x| x.to_string()));
            r.push((s.accepted as u8).to_string());
            r
        })
        .collect();
    write_rows(out, "samples.csv", &header, &rows)?;
    let acc = samples.iter().filter(|s| s.accepted).count();
    Ok(Produced {
        streams: vec![seeds::ASA],
        summary: vec![format!("{} samples, {acc} accepted moves", samples.len())],
        ..Default::default()
    })
}
