//! End-to-end analysis of spatial fields: detrending, pairwise gravity-model likelihood,
//! penalty selection, estimation and report files.

mod smooth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{estimate_along_path, fit, report_grid, uniform_report, EstimateReport, Fit, FitOptions, PreliminaryMode};
use crate::model::{Dataset, ModelSpec, Site, SubLikelihoodModel};
use crate::report::{write_report, Report, ReportFormat};
use crate::select::SelectionRule;

pub use smooth::{default_bandwidth, detrend_normalize, kernel_weights, nadaraya_watson, time_index, Detrended};

/// Number of penalty levels in the default report grid.
pub const DEFAULT_REPORT_ROWS: usize = 11;

/// Reads sites from CSV with columns `id, lat, lon, population_millions`.
pub fn read_sites_csv(path: impl AsRef<Path>) -> Result<Vec<Site>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut sites = Vec::new();
    for rec in rdr.deserialize() {
        let site: Site = rec?;
        sites.push(site);
    }
    if sites.is_empty() {
        return Err(Error::InvalidInput("sites file has no rows".into()));
    }
    crate::model::validate_sites(&sites)?;
    Ok(sites)
}

pub fn write_sites_csv(sites: &[Site], path: impl AsRef<Path>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["id", "lat", "lon", "population_millions"])?;
    for s in sites {
        wtr.write_record([s.id.clone(), s.lat.to_string(), s.lon.to_string(), s.population.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Selected fit, estimates along the report grid and the uniform-weights comparison.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub fit: Fit,
    pub estimates: Vec<EstimateReport>,
    pub uniform: EstimateReport,
    pub report: Report,
}

/// Runs [`fit`] and estimates at each report penalty level (default: the `rows` largest knots
/// below the start of the path).
pub fn analyze(
    model: &dyn SubLikelihoodModel,
    data: &Dataset,
    options: &FitOptions,
    report_lambdas: Option<&[f64]>,
    rows: usize,
) -> Result<Analysis> {
    let fit = fit(model, data, options)?;
    let lambdas = match report_lambdas {
        Some(l) => {
            let mut l = l.to_vec();
            l.sort_by(|a, b| b.total_cmp(a));
            l.dedup();
            l
        }
        None => report_grid(&fit.path, rows),
    };
    let estimates = estimate_along_path(model, data, &fit, &lambdas, options.full_iterate)?;
    let uniform = uniform_report(model, data, &fit, options.full_iterate)?;
    let report = Report::new(&estimates, Some(&uniform), model.sublikelihood_count())?;
    Ok(Analysis {
        fit,
        estimates,
        uniform,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub input_csv: PathBuf,
    pub sites_csv: PathBuf,
    /// Smoother bandwidth on the `[0, 1]` time scale; `None` uses [`default_bandwidth`].
    pub bandwidth: Option<f64>,
    pub selection: SelectionRule,
    pub lambda_grid: Option<Vec<f64>>,
    pub report_rows: usize,
    /// Seeds the random-subset preliminary mode when one is requested.
    pub seed: u64,
    pub random_subset: Option<usize>,
    pub output_dir: PathBuf,
    pub dump_cov: bool,
    pub full_iterate: bool,
    /// Skip detrending and normalization (data already standardized).
    pub skip_detrend: bool,
}

impl PipelineConfig {
    pub fn new(input_csv: impl Into<PathBuf>, sites_csv: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            input_csv: input_csv.into(),
            sites_csv: sites_csv.into(),
            bandwidth: None,
            selection: SelectionRule::default(),
            lambda_grid: None,
            report_rows: DEFAULT_REPORT_ROWS,
            seed: 0,
            random_subset: None,
            output_dir: output_dir.into(),
            dump_cov: false,
            full_iterate: false,
            skip_detrend: false,
        }
    }

    fn validate(&self) -> Result<()> {
        for p in [&self.input_csv, &self.sites_csv] {
            if !p.is_file() {
                return Err(Error::InvalidInput(format!("input file {} does not exist", p.display())));
            }
        }
        self.selection.validate()?;
        if self.report_rows == 0 {
            return Err(Error::InvalidInput("report_rows must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub sites: Vec<Site>,
    pub detrended: Option<Detrended>,
    pub analysis: Analysis,
    pub files: Vec<PathBuf>,
}

/// One selected pair, mapped back to its sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPair {
    pub index: usize,
    pub a: usize,
    pub b: usize,
    pub id_a: String,
    pub id_b: String,
    pub weight: f64,
}

pub fn selected_pairs(spec: &ModelSpec, sites: &[Site], analysis: &Analysis) -> Vec<SelectedPair> {
    let rule = &analysis.fit.selection.rule;
    rule.active_set
        .iter()
        .zip(&rule.values)
        .map(|(&index, &weight)| {
            let (a, b) = spec.pairs()[index];
            SelectedPair {
                index,
                a,
                b,
                id_a: sites[a].id.clone(),
                id_b: sites[b].id.clone(),
                weight,
            }
        })
        .collect()
}

/// Reads the inputs, detrends, fits and writes all artifacts into `output_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let raw = Dataset::from_csv_path(&config.input_csv)?;
    let sites = read_sites_csv(&config.sites_csv)?;
    if sites.len() != raw.d() {
        return Err(Error::InvalidInput(format!(
            "{} sites but the data has {} columns",
            sites.len(),
            raw.d()
        )));
    }
    let (data, detrended) = if config.skip_detrend {
        (raw, None)
    } else {
        let det = detrend_normalize(&raw, config.bandwidth)?;
        (det.dataset()?, Some(det))
    };
    let spec = ModelSpec::gravity(sites.clone(), vec![1.0; sites.len()])?;
    let options = FitOptions {
        preliminary: match config.random_subset {
            Some(size) => PreliminaryMode::RandomSubset { size, seed: config.seed },
            None => PreliminaryMode::Uniform,
        },
        selection: config.selection,
        full_iterate: config.full_iterate,
        ..FitOptions::default()
    };
    let analysis = analyze(&spec, &data, &options, config.lambda_grid.as_deref(), config.report_rows)?;

    fs::create_dir_all(&config.output_dir)?;
    let dir = &config.output_dir;
    let mut files = Vec::new();
    for (name, format) in [
        ("report.txt", ReportFormat::Text),
        ("report.csv", ReportFormat::Csv),
        ("report.json", ReportFormat::Json),
    ] {
        let path = dir.join(name);
        write_report(&analysis.report, format, &path)?;
        files.push(path);
    }
    let estimate_path = dir.join("estimate.json");
    fs::write(&estimate_path, analysis.fit.report.to_json()?)?;
    files.push(estimate_path);

    let path_json = dir.join("path.json");
    analysis.fit.path.write_json(&path_json)?;
    files.push(path_json);
    let path_csv = dir.join("path_long.csv");
    analysis.fit.path.write_long_csv(fs::File::create(&path_csv)?)?;
    files.push(path_csv);

    let pairs_path = dir.join("selected_pairs.csv");
    let mut wtr = csv::Writer::from_path(&pairs_path)?;
    for pair in selected_pairs(&spec, &sites, &analysis) {
        wtr.serialize(pair)?;
    }
    wtr.flush()?;
    files.push(pairs_path);

    if config.dump_cov {
        let cov_path = dir.join("score_covariance.csv");
        analysis.fit.covariance.write_csv(fs::File::create(&cov_path)?)?;
        files.push(cov_path);
    }
    if let Some(det) = &detrended {
        let det_path = dir.join("residuals.csv");
        det.dataset()?.write_csv(fs::File::create(&det_path)?)?;
        files.push(det_path);
    }
    Ok(PipelineOutput {
        sites,
        detrended,
        analysis,
        files,
    })
}
