//! Population solution paths, efficiency curves and synthetic-data studies.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{exchangeable_are, exchangeable_weight, godambe_information, EstimateReport, FitOptions};
use crate::model::{gravity_covariance, Dataset, ModelSpec, Site};
use crate::pipeline::{analyze, write_sites_csv, DEFAULT_REPORT_ROWS};
use crate::report::{emit_report, Report, ReportFormat};
use crate::select::{select_lambda_trace, SelectionRule, DEFAULT_TAU};
use crate::solver::{solution_path, solve_weights, SolutionPath};
use crate::stats::{monte_carlo_score_covariance, population_score_covariance, ScoreCovariance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Scenario {
    /// Correlated heterogeneous location model, `Sigma_jj = j`, `Sigma_jk = rho sqrt(jk)`.
    Fig1 { rho: f64, m: usize },
    /// Pairwise likelihood for `Sigma_jk = exp(-theta sqrt(2|j - k|))` in dimension `d`.
    Fig2 { theta: f64, d: usize },
    Exchangeable { rho: f64, m: usize },
    GravitySynthetic { d: usize, n: usize, theta: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McOracle {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Extra penalty levels at which to tabulate efficiency or estimates.
    #[serde(default)]
    pub lambda_grid: Option<Vec<f64>>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub output_prefix: Option<PathBuf>,
    /// Replace the closed-form pairwise `J` by a Monte Carlo estimate.
    #[serde(default)]
    pub mc_oracle: Option<McOracle>,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            lambda_grid: None,
            tau: DEFAULT_TAU,
            output_prefix: None,
            mc_oracle: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        SelectionRule::TraceRatio(self.tau).validate()?;
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        match self.scenario {
            Scenario::Fig1 { rho, m } if !(0.0..1.0).contains(&rho) || m < 2 => bad(format!("fig1 needs 0 <= rho < 1 and m >= 2, got rho={rho}, m={m}")),
            Scenario::Fig2 { theta, d } if !(theta > 0.0) || d < 2 => bad(format!("fig2 needs theta > 0 and d >= 2, got theta={theta}, d={d}")),
            Scenario::Exchangeable { rho, m } if !(rho > 0.0 && rho < 1.0) || m < 1 => bad(format!("exchangeable needs 0 < rho < 1, got {rho}")),
            Scenario::GravitySynthetic { d, n, theta, .. } if d < 2 || n < 2 || !(theta > 0.0) => {
                bad(format!("gravity-synthetic needs d >= 2, n >= 2, theta > 0; got d={d}, n={n}, theta={theta}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreRow {
    pub lambda: f64,
    pub n_active: usize,
    pub are: f64,
    /// Whether the row is a path knot (as opposed to an extra grid value).
    pub knot: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeableRow {
    pub lambda: f64,
    pub weight_formula: f64,
    /// `max_j |w_solver_j - w_formula|`.
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeableAre {
    pub m: usize,
    pub rho: f64,
    pub are: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marker {
    pub lambda: f64,
    pub phi: f64,
    pub are: f64,
    pub n_active: usize,
}

/// Everything a scenario produces.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub path: Option<SolutionPath>,
    pub are: Vec<AreRow>,
    /// Trace-ratio selection on the path, marking the dashed line of the efficiency plot.
    pub marker: Option<Marker>,
    pub exchangeable_rows: Vec<ExchangeableRow>,
    pub exchangeable_are: Vec<ExchangeableAre>,
    pub estimates: Vec<EstimateReport>,
    pub uniform: Option<EstimateReport>,
    pub selected: Option<EstimateReport>,
    pub report: Option<Report>,
    pub sites: Vec<Site>,
}

/// `(1 - rho) diag(1..m) + rho u u'` with `u_j = sqrt(j)`.
pub fn fig1_covariance(rho: f64, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |j, k| {
        let (a, b) = ((j + 1) as f64, (k + 1) as f64);
        if j == k {
            a
        } else {
            rho * (a * b).sqrt()
        }
    })
}

/// `delta_jk = sqrt(2 |j - k|)`.
pub fn fig2_distances(d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, d, |j, k| (2.0 * (j as f64 - k as f64).abs()).sqrt())
}

/// Seeded sites in a 11 x 11 degree box with populations in `[0.2, 3]` million.
pub fn synthetic_sites(d: usize, theta: f64, seed: u64) -> Result<Vec<Site>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites: Vec<Site> = Vec::with_capacity(d);
    let mut attempts = 0usize;
    while sites.len() < d {
        attempts += 1;
        if attempts > SITE_ATTEMPTS * d.max(1) {
            return Err(Error::InvalidInput(format!(
                "could not place {d} sites with a positive definite gravity covariance at theta = {theta}"
            )));
        }
        let lat = rng.random_range(36.0..47.0);
        let lon = rng.random_range(7.0..18.0);
        let pop = rng.random_range(0.1..1.0);
        sites.push(Site::new(format!("s{:02}", sites.len() + 1), lat, lon, pop));
        let cov = gravity_covariance(theta, &sites, &vec![1.0; sites.len()])?;
        if cov.symmetric_eigenvalues().min() < MIN_SITE_EIGENVALUE {
            sites.pop();
        }
    }
    Ok(sites)
}

// Candidate sites are rejected when the covariance would drop below this eigenvalue.
const MIN_SITE_EIGENVALUE: f64 = 0.05;
const SITE_ATTEMPTS: usize = 10_000;

/// Efficiency of every knot rule (and extra grid values) relative to the full likelihood.
pub fn are_along_path(j: &ScoreCovariance, fisher: f64, path: &SolutionPath, extra: &[f64]) -> Vec<AreRow> {
    let mut rows: Vec<AreRow> = path
        .knots
        .iter()
        .map(|k| AreRow {
            lambda: k.lambda,
            n_active: k.rule.n_active(),
            are: godambe_information(j, &k.rule.weights()) / fisher,
            knot: true,
        })
        .collect();
    for &lambda in extra {
        if let Some(w) = path.weights_at(lambda) {
            rows.push(AreRow {
                lambda,
                n_active: w.iter().filter(|v| **v != 0.0).count(),
                are: godambe_information(j, &w) / fisher,
                knot: false,
            });
        }
    }
    rows.sort_by(|a, b| b.lambda.total_cmp(&a.lambda).then(b.knot.cmp(&a.knot)));
    rows
}

fn marker(j: &ScoreCovariance, fisher: f64, path: &SolutionPath, tau: f64) -> Result<Marker> {
    let sel = select_lambda_trace(path, tau)?;
    Ok(Marker {
        lambda: sel.lambda,
        phi: sel.phi,
        are: godambe_information(j, &sel.rule.weights()) / fisher,
        n_active: sel.rule.n_active(),
    })
}

fn population_study(spec: &ModelSpec, theta: f64, config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let j = match config.mc_oracle {
        Some(mc) => monte_carlo_score_covariance(spec, theta, mc.n, mc.seed)?,
        None => population_score_covariance(spec, theta)?,
    };
    let fisher = spec.fisher_information(theta)?;
    let path = solution_path(&j, 0.0)?;
    let extra = config.lambda_grid.clone().unwrap_or_default();
    let are = are_along_path(&j, fisher, &path, &extra);
    let marker = marker(&j, fisher, &path, config.tau)?;
    Ok(ExperimentOutput {
        path: Some(path),
        are,
        marker: Some(marker),
        ..ExperimentOutput::default()
    })
}

pub fn run_fig1(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let Scenario::Fig1 { rho, m } = config.scenario else {
        return Err(Error::InvalidInput("run_fig1 needs a fig1 scenario".into()));
    };
    config.validate()?;
    let spec = ModelSpec::location(fig1_covariance(rho, m))?;
    population_study(&spec, 0.0, config)
}

pub fn run_fig2(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let Scenario::Fig2 { theta, d } = config.scenario else {
        return Err(Error::InvalidInput("run_fig2 needs a fig2 scenario".into()));
    };
    config.validate()?;
    let spec = ModelSpec::pairwise(fig2_distances(d))?;
    population_study(&spec, theta, config)
}

pub fn run_exchangeable(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let Scenario::Exchangeable { rho, m } = config.scenario else {
        return Err(Error::InvalidInput("run_exchangeable needs an exchangeable scenario".into()));
    };
    config.validate()?;
    let spec = ModelSpec::exchangeable(m, rho)?;
    let j = population_score_covariance(&spec, 0.0)?;
    let lambdas = config
        .lambda_grid
        .clone()
        .unwrap_or_else(|| (0..=12).map(|i| i as f64 * 0.1).collect());
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let w = solve_weights(&j, lambda)?.weights();
        let formula = exchangeable_weight(rho, m, lambda);
        let err = w.iter().map(|v| (v - formula).abs()).fold(0.0, f64::max);
        rows.push(ExchangeableRow {
            lambda,
            weight_formula: formula,
            max_abs_error: err,
        });
    }
    let mut ms = vec![5, 9, 50];
    if !ms.contains(&m) {
        ms.push(m);
    }
    let table = ms
        .into_iter()
        .map(|mm| ExchangeableAre {
            m: mm,
            rho,
            are: exchangeable_are(rho, mm),
        })
        .collect();
    let path = solution_path(&j, 0.0)?;
    let fisher = spec.fisher_information(0.0)?;
    let are = are_along_path(&j, fisher, &path, &[]);
    Ok(ExperimentOutput {
        path: Some(path),
        are,
        exchangeable_rows: rows,
        exchangeable_are: table,
        ..ExperimentOutput::default()
    })
}

/// Simulated gravity-model fields analysed with the full selection-and-estimation procedure.
pub fn run_gravity_synthetic(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let Scenario::GravitySynthetic { d, n, theta, seed } = config.scenario else {
        return Err(Error::InvalidInput("run_gravity_synthetic needs a gravity-synthetic scenario".into()));
    };
    config.validate()?;
    let (spec, data) = gravity_synthetic_data(d, n, theta, seed)?;
    let options = FitOptions {
        selection: SelectionRule::TraceRatio(config.tau),
        ..FitOptions::default()
    };
    let analysis = analyze(&spec, &data, &options, config.lambda_grid.as_deref(), DEFAULT_REPORT_ROWS)?;
    let sites = match spec.kind() {
        crate::model::ModelKind::GravityField { sites, .. } => sites.clone(),
        _ => unreachable!("gravity spec"),
    };
    Ok(ExperimentOutput {
        path: Some(analysis.fit.path.clone()),
        estimates: analysis.estimates,
        uniform: Some(analysis.uniform),
        selected: Some(analysis.fit.report),
        report: Some(analysis.report),
        sites,
        ..ExperimentOutput::default()
    })
}

/// Sites from `seed`, then `n` unit-variance fields at `theta` from the stream `seed + 1`.
pub fn gravity_synthetic_data(d: usize, n: usize, theta: f64, seed: u64) -> Result<(ModelSpec, Dataset)> {
    let sites = synthetic_sites(d, theta, seed)?;
    let spec = ModelSpec::gravity(sites, vec![1.0; d])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let data = spec.sample(theta, n, &mut rng)?;
    Ok((spec, data))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    match config.scenario {
        Scenario::Fig1 { .. } => run_fig1(config),
        Scenario::Fig2 { .. } => run_fig2(config),
        Scenario::Exchangeable { .. } => run_exchangeable(config),
        Scenario::GravitySynthetic { .. } => run_gravity_synthetic(config),
    }
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    prefix.with_file_name(name)
}

fn csv_string(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header)?;
    for r in rows {
        wtr.write_record(r)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    files: Vec<String>,
    marker: Option<&'a Marker>,
    n_knots: Option<usize>,
}

/// Writes `<prefix>_path.csv`, `<prefix>_are.csv`, `<prefix>_report.csv` and
/// `<prefix>_manifest.json`; returns the paths written.
pub fn write_outputs(config: &ExperimentConfig, out: &ExperimentOutput, prefix: &Path) -> Result<Vec<PathBuf>> {
    if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut files = Vec::new();

    let path_file = with_suffix(prefix, "_path.csv");
    let mut buf = Vec::new();
    if let Some(path) = &out.path {
        path.write_long_csv(&mut buf)?;
    }
    fs::write(&path_file, buf)?;
    files.push(path_file);

    let are_file = with_suffix(prefix, "_are.csv");
    let are_csv = csv_string(
        &["lambda", "n_active", "are", "knot"],
        out.are.iter().map(|r| vec![format!("{:e}", r.lambda), r.n_active.to_string(), format!("{:e}", r.are), r.knot.to_string()]),
    )?;
    fs::write(&are_file, are_csv)?;
    files.push(are_file);

    let report_file = with_suffix(prefix, "_report.csv");
    let report_csv = if let Some(report) = &out.report {
        emit_report(report, ReportFormat::Csv)?
    } else if !out.exchangeable_rows.is_empty() {
        let mut s = csv_string(
            &["lambda", "weight_formula", "max_abs_error"],
            out.exchangeable_rows
                .iter()
                .map(|r| vec![format!("{:e}", r.lambda), format!("{:e}", r.weight_formula), format!("{:e}", r.max_abs_error)]),
        )?;
        s.push_str(&csv_string(
            &["m", "rho", "are"],
            out.exchangeable_are.iter().map(|r| vec![r.m.to_string(), format!("{}", r.rho), format!("{:e}", r.are)]),
        )?);
        s
    } else {
        let m = out.marker.as_ref();
        let are0 = out.are.iter().rev().find(|r| r.knot).map(|r| r.are);
        csv_string(
            &["quantity", "value"],
            [
                ("tau", Some(config.tau)),
                ("lambda_hat", m.map(|m| m.lambda)),
                ("phi_at_lambda_hat", m.map(|m| m.phi)),
                ("are_at_lambda_hat", m.map(|m| m.are)),
                ("n_active_at_lambda_hat", m.map(|m| m.n_active as f64)),
                ("are_at_lambda_min", are0),
            ]
            .into_iter()
            .map(|(k, v)| vec![k.to_string(), v.map(|v| format!("{v:e}")).unwrap_or_default()]),
        )?
    };
    fs::write(&report_file, report_csv)?;
    files.push(report_file);

    if !out.sites.is_empty() {
        let sites_file = with_suffix(prefix, "_sites.csv");
        write_sites_csv(&out.sites, &sites_file)?;
        files.push(sites_file);
    }

    let manifest_file = with_suffix(prefix, "_manifest.json");
    let manifest = Manifest {
        config,
        files: files.iter().map(|f| f.display().to_string()).collect(),
        marker: out.marker.as_ref(),
        n_knots: out.path.as_ref().map(|p| p.knots.len()),
    };
    fs::write(&manifest_file, serde_json::to_string_pretty(&manifest)?)?;
    files.push(manifest_file);
    Ok(files)
}

/// `E|U(w) - U(w0)|^2 / 2 = (w - w0)' J (w - w0) / 2`.
pub fn score_distance(j: &ScoreCovariance, w: &DVector<f64>, w0: &DVector<f64>) -> f64 {
    let diff = w - w0;
    0.5 * diff.dot(&(j.matrix() * &diff))
}
