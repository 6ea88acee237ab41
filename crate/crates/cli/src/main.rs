use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sparsecl::estimate::{fit, FitOptions, PreliminaryMode};
use sparsecl::model::{evaluate_scores, Dataset, ModelConfig};
use sparsecl::pipeline::{analyze, run_pipeline, PipelineConfig, DEFAULT_REPORT_ROWS};
use sparsecl::report::{emit_report, ReportFormat};
use sparsecl::select::{SelectionRule, DEFAULT_DELTA, DEFAULT_TAU};
use sparsecl::sim::{run_experiment, write_outputs, ExperimentConfig, McOracle, Scenario};
use sparsecl::solver::{solution_path, SolutionPath};
use sparsecl::stats::{empirical_score_covariance, population_score_covariance};
use sparsecl::nalgebra::DVector;
use sparsecl::{Error, ModelSpec};

#[derive(Parser)]
#[command(name = "sparsecl", version, about = "Sparse composite likelihood selection and estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a built-in simulation scenario and write its CSV/JSON outputs.
    Simulate(SimulateArgs),
    /// Compute the solution path of the penalized criterion.
    Path(PathArgs),
    /// Select a penalty level on a saved path.
    Select(SelectArgs),
    /// Fit a model to data: selection, one-step estimate and sandwich standard errors.
    Estimate(EstimateArgs),
    /// Detrend, normalize and analyse spatial fields with the gravity covariance model.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioName {
    Fig1,
    Fig2,
    Exchangeable,
    Gravity,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum RuleName {
    Trace,
    Relative,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatName {
    Text,
    Csv,
    Json,
}

impl From<FormatName> for ReportFormat {
    fn from(f: FormatName) -> Self {
        match f {
            FormatName::Text => ReportFormat::Text,
            FormatName::Csv => ReportFormat::Csv,
            FormatName::Json => ReportFormat::Json,
        }
    }
}

#[derive(Args, Clone)]
struct SelectionArgs {
    /// Selection rule.
    #[arg(long, value_enum, default_value = "trace")]
    rule: RuleName,
    /// Trace-ratio threshold.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Relative-tolerance threshold.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Extra penalty values (comma separated).
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Vec<f64>,
}

impl SelectionArgs {
    fn rule(&self) -> SelectionRule {
        match self.rule {
            RuleName::Trace => SelectionRule::TraceRatio(self.tau),
            RuleName::Relative => SelectionRule::RelativeTolerance(self.delta),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    scenario: ScenarioName,
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Number of sub-likelihoods (fig1, exchangeable).
    #[arg(long, default_value_t = 20)]
    m: usize,
    /// Variate dimension (fig2, gravity).
    #[arg(long, default_value_t = 10)]
    d: usize,
    #[arg(long, default_value_t = 0.6)]
    theta: f64,
    /// Sample size (gravity).
    #[arg(long, default_value_t = 60)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Vec<f64>,
    /// Monte Carlo score covariance with N draws and SEED instead of the closed form.
    #[arg(long, num_args = 2, value_names = ["N", "SEED"])]
    mc_oracle: Option<Vec<u64>>,
    /// Output prefix; files are `<prefix>_path.csv`, `_are.csv`, `_report.csv`, `_manifest.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelDataArgs {
    /// JSON model configuration.
    #[arg(long)]
    model: PathBuf,
    /// Observations CSV (rows are observations).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct PathArgs {
    #[command(flatten)]
    input: ModelDataArgs,
    /// Evaluate the score covariance at this parameter instead of the preliminary estimate.
    #[arg(long)]
    theta: Option<f64>,
    /// Use the exact population covariance of a built-in model (needs --theta).
    #[arg(long)]
    population: bool,
    #[arg(long)]
    lambda_min: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Random-subset preliminary estimate with this many sub-likelihoods (seeded by --seed).
    #[arg(long)]
    random_subset: Option<usize>,
    /// Path JSON output.
    #[arg(long)]
    out: PathBuf,
    /// Long-format CSV of the path.
    #[arg(long)]
    long_csv: Option<PathBuf>,
    /// Write the score covariance matrix as CSV.
    #[arg(long)]
    dump_cov: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    /// Path JSON written by `path`.
    #[arg(long)]
    path: PathBuf,
    #[command(flatten)]
    selection: SelectionArgs,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    input: ModelDataArgs,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Fixed penalty level, bypassing selection.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    random_subset: Option<usize>,
    /// Iterate Newton to convergence instead of a single step.
    #[arg(long)]
    full_iterate: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatName,
    /// Write the selected estimate as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dump_cov: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Observations CSV: rows are days, columns are sites.
    #[arg(long)]
    data: PathBuf,
    /// Sites CSV with columns id, lat, lon, population_millions.
    #[arg(long)]
    sites: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    bandwidth: Option<f64>,
    #[command(flatten)]
    selection: SelectionArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    random_subset: Option<usize>,
    #[arg(long)]
    dump_cov: bool,
    #[arg(long)]
    full_iterate: bool,
    /// Data are already detrended and standardized.
    #[arg(long)]
    skip_detrend: bool,
    #[arg(long, value_enum, default_value = "text")]
    format: FormatName,
}

fn preliminary(random_subset: Option<usize>, seed: u64) -> PreliminaryMode {
    match random_subset {
        Some(size) => PreliminaryMode::RandomSubset { size, seed },
        None => PreliminaryMode::Uniform,
    }
}

fn load(input: &ModelDataArgs) -> sparsecl::Result<(ModelSpec, Option<Dataset>)> {
    let spec = ModelConfig::from_path(&input.model)?.build()?;
    let data = input.data.as_ref().map(Dataset::from_csv_path).transpose()?;
    Ok((spec, data))
}

fn need_data(data: Option<Dataset>) -> sparsecl::Result<Dataset> {
    data.ok_or_else(|| Error::InvalidInput("--data is required".into()))
}

fn simulate(args: SimulateArgs) -> sparsecl::Result<()> {
    let scenario = match args.scenario {
        ScenarioName::Fig1 => Scenario::Fig1 { rho: args.rho, m: args.m },
        ScenarioName::Fig2 => Scenario::Fig2 { theta: args.theta, d: args.d },
        ScenarioName::Exchangeable => Scenario::Exchangeable { rho: args.rho, m: args.m },
        ScenarioName::Gravity => Scenario::GravitySynthetic {
            d: args.d,
            n: args.n,
            theta: args.theta,
            seed: args.seed,
        },
    };
    let config = ExperimentConfig {
        scenario,
        lambda_grid: (!args.lambda_grid.is_empty()).then_some(args.lambda_grid),
        tau: args.tau,
        output_prefix: Some(args.out.clone()),
        mc_oracle: args.mc_oracle.map(|v| McOracle { n: v[0] as usize, seed: v[1] }),
    };
    let out = run_experiment(&config)?;
    let files = write_outputs(&config, &out, &args.out)?;
    if let Some(m) = &out.marker {
        println!("lambda_hat = {:e}  phi = {:.4}  ARE = {:.4}  active = {}", m.lambda, m.phi, m.are, m.n_active);
    }
    if let Some(report) = &out.report {
        print!("{}", emit_report(report, ReportFormat::Text)?);
    }
    for r in &out.exchangeable_are {
        println!("m = {:>4}  rho = {}  ARE = {:.3}", r.m, r.rho, r.are);
    }
    for f in files {
        info!("wrote {}", f.display());
    }
    Ok(())
}

fn path_cmd(args: PathArgs) -> sparsecl::Result<()> {
    let (spec, data) = load(&args.input)?;
    let j = if args.population {
        let theta = args
            .theta
            .ok_or_else(|| Error::InvalidInput("--population needs --theta".into()))?;
        population_score_covariance(&spec, theta)?
    } else {
        let data = need_data(data)?;
        let theta = match args.theta {
            Some(t) => vec![t],
            None => {
                sparsecl::estimate::preliminary_estimate(&spec, &data, preliminary(args.random_subset, args.seed.unwrap_or(0)))?.theta
            }
        };
        let batch = evaluate_scores(&spec, &DVector::from_row_slice(&theta), &data, false)?;
        empirical_score_covariance(&batch)?
    };
    let lambda_min = args.lambda_min.unwrap_or_else(|| sparsecl::estimate::default_lambda_min(&j));
    let path = solution_path(&j, lambda_min)?;
    path.write_json(&args.out)?;
    if let Some(csv) = &args.long_csv {
        path.write_long_csv(fs::File::create(csv)?)?;
    }
    if let Some(cov) = &args.dump_cov {
        j.write_csv(fs::File::create(cov)?)?;
    }
    println!(
        "{} knots from lambda = {:e} to {:e}; final support {}",
        path.knots.len(),
        path.lambda_start,
        path.lambda_min,
        path.knots.last().map(|k| k.rule.n_active()).unwrap_or(0)
    );
    Ok(())
}

fn select_cmd(args: SelectArgs) -> sparsecl::Result<()> {
    let path = SolutionPath::read_json(&args.path)?;
    let sel = args.selection.rule().apply(&path, &args.selection.lambda_grid)?;
    println!("{}", serde_json::to_string_pretty(&sel)?);
    Ok(())
}

fn estimate_cmd(args: EstimateArgs) -> sparsecl::Result<()> {
    let (spec, data) = load(&args.input)?;
    let data = need_data(data)?;
    let options = FitOptions {
        preliminary: preliminary(args.random_subset, args.seed),
        selection: args.selection.rule(),
        lambda: args.lambda,
        lambda_grid: args.selection.lambda_grid.clone(),
        full_iterate: args.full_iterate,
        ..FitOptions::default()
    };
    if args.lambda.is_none() {
        let analysis = analyze(&spec, &data, &options, None, DEFAULT_REPORT_ROWS)?;
        print!("{}", emit_report(&analysis.report, args.format.into())?);
        finish_estimate(&args, &analysis.fit)?;
    } else {
        let result = fit(&spec, &data, &options)?;
        println!("{}", result.report.to_json()?);
        finish_estimate(&args, &result)?;
    }
    Ok(())
}

fn finish_estimate(args: &EstimateArgs, result: &sparsecl::estimate::Fit) -> sparsecl::Result<()> {
    let r = &result.report;
    println!(
        "selected lambda = {:e}  theta_hat = {:?}  SE = {:?}  active = {}",
        result.selection.lambda, r.theta_hat, r.standard_errors, r.n_active
    );
    if let Some(out) = &args.out {
        fs::write(out, r.to_json()?)?;
    }
    if let Some(cov) = &args.dump_cov {
        result.covariance.write_csv(fs::File::create(cov)?)?;
    }
    Ok(())
}

fn pipeline_cmd(args: PipelineArgs) -> sparsecl::Result<()> {
    let mut config = PipelineConfig::new(&args.data, &args.sites, &args.out_dir);
    config.bandwidth = args.bandwidth;
    config.selection = args.selection.rule();
    config.lambda_grid = (!args.selection.lambda_grid.is_empty()).then(|| args.selection.lambda_grid.clone());
    config.seed = args.seed;
    config.random_subset = args.random_subset;
    config.dump_cov = args.dump_cov;
    config.full_iterate = args.full_iterate;
    config.skip_detrend = args.skip_detrend;
    let out = run_pipeline(&config)?;
    print!("{}", emit_report(&out.analysis.report, args.format.into())?);
    let sel = &out.analysis.fit;
    println!(
        "selected lambda = {:e}: theta_hat = {:.6e}, SE = {:.3e}, {} of {} pairs",
        sel.selection.lambda,
        sel.report.theta_hat[0],
        sel.report.standard_errors[0],
        sel.report.n_active,
        sel.covariance.dim()
    );
    for f in &out.files {
        info!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Path(a) => path_cmd(a),
        Command::Select(a) => select_cmd(a),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
