//! Preliminary estimation, the one-step Newton update and sandwich inference.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::spd_inverse_with_jitter;
use crate::model::{evaluate_scores, Dataset, ModelSpec, SubLikelihoodModel};
use crate::select::{Selection, SelectionRule};
use crate::solver::{solution_path, CompositionRule, SolutionPath};
use crate::stats::{empirical_score_covariance, eta_and_singularity, population_score_covariance, ScoreCovariance};

/// Weights used for the preliminary estimating equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum PreliminaryMode {
    #[default]
    Uniform,
    /// Unit weights on a seeded random subset of `size` sub-likelihoods.
    RandomSubset { size: usize, seed: u64 },
}

impl PreliminaryMode {
    pub fn weights(&self, m: usize) -> Result<DVector<f64>> {
        match *self {
            PreliminaryMode::Uniform => Ok(DVector::from_element(m, 1.0)),
            PreliminaryMode::RandomSubset { size, seed } => {
                if size == 0 || size > m {
                    return Err(Error::InvalidInput(format!("random subset size {size} must lie in 1..={m}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut w = DVector::zeros(m);
                for i in sample(&mut rng, m, size) {
                    w[i] = 1.0;
                }
                Ok(w)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preliminary {
    pub theta: Vec<f64>,
    pub iterations: usize,
    /// Norm of the mean weighted score at the returned root.
    pub residual: f64,
}

const ROOT_MAX_ITER: usize = 200;

/// Root of `sum_j w_j sum_i U_j(theta; X_i) = 0` with uniform or random-subset weights.
pub fn preliminary_estimate(model: &dyn SubLikelihoodModel, data: &Dataset, mode: PreliminaryMode) -> Result<Preliminary> {
    let w = mode.weights(model.sublikelihood_count())?;
    solve_estimating_equation(model, data, &w)
}

/// Root of the weighted estimating equation; safeguarded Newton with bisection for `p = 1`,
/// damped Newton otherwise.
pub fn solve_estimating_equation(model: &dyn SubLikelihoodModel, data: &Dataset, w: &DVector<f64>) -> Result<Preliminary> {
    if w.len() != model.sublikelihood_count() {
        return Err(Error::InvalidInput("weight vector length differs from the number of sub-likelihoods".into()));
    }
    if w.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidInput("estimating equation with all-zero weights".into()));
    }
    if model.parameter_dimension() == 1 {
        scalar_root(model, data, w)
    } else {
        damped_newton(model, data, w)
    }
}

fn mean_score(model: &dyn SubLikelihoodModel, data: &Dataset, w: &DVector<f64>, theta: f64) -> Result<f64> {
    let batch = evaluate_scores(model, &DVector::from_element(1, theta), data, false)?;
    Ok(batch.mean_composite_score(w)[0])
}

fn mean_score_and_slope(model: &dyn SubLikelihoodModel, data: &Dataset, w: &DVector<f64>, theta: f64) -> Result<(f64, f64)> {
    let batch = evaluate_scores(model, &DVector::from_element(1, theta), data, true)?;
    Ok((batch.mean_composite_score(w)[0], batch.mean_composite_gradient(w)?[(0, 0)]))
}

/// Candidate points for bracketing a root inside the admissible interval.
fn scan_grid(lo: f64, hi: f64) -> Vec<f64> {
    let offsets: Vec<f64> = (-60..=40).map(|k| 10f64.powf(k as f64 / 10.0)).collect();
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => (1..200).map(|i| lo + (hi - lo) * i as f64 / 200.0).collect(),
        (true, false) => offsets.iter().map(|o| lo + o).collect(),
        (false, true) => offsets.iter().rev().map(|o| hi - o).collect(),
        (false, false) => {
            let mut g: Vec<f64> = offsets.iter().rev().map(|o| -o).collect();
            g.push(0.0);
            g.extend(offsets.iter().copied());
            g
        }
    }
}

fn in_domain(theta: f64, (lo, hi): (f64, f64)) -> bool {
    theta > lo && theta < hi
}

fn scalar_root(model: &dyn SubLikelihoodModel, data: &Dataset, w: &DVector<f64>) -> Result<Preliminary> {
    let domain = model.theta_domain();
    let mut trace = Vec::new();

    // Unbounded domains first try plain Newton from the origin, exact for linear scores.
    if !domain.0.is_finite() && !domain.1.is_finite() {
        let mut theta = 0.0;
        for it in 1..=ROOT_MAX_ITER {
            let (g, slope) = match mean_score_and_slope(model, data, w, theta) {
                Ok(v) => v,
                Err(_) => break,
            };
            trace.push((theta, g));
            if slope == 0.0 || !slope.is_finite() {
                break;
            }
            let step = g / slope;
            theta -= step;
            if !theta.is_finite() {
                break;
            }
            if step.abs() <= 1e-13 * (1.0 + theta.abs()) {
                let residual = mean_score(model, data, w, theta)?.abs();
                return Ok(Preliminary {
                    theta: vec![theta],
                    iterations: it,
                    residual,
                });
            }
        }
    }

    let mut values = Vec::new();
    for theta in scan_grid(domain.0, domain.1) {
        if let Ok(g) = mean_score(model, data, w, theta) {
            if g.is_finite() {
                trace.push((theta, g));
                values.push((theta, g));
            }
        }
    }
    // Exact zeros are skipped: they come from scores underflowing far out in the domain.
    values.retain(|v| v.1 != 0.0);
    let bracket = values
        .windows(2)
        .find(|p| p[0].1 > 0.0 && p[1].1 < 0.0)
        .or_else(|| values.windows(2).find(|p| p[0].1 * p[1].1 < 0.0))
        .map(|p| (p[0], p[1]));
    let Some(((mut a, mut ga), (mut b, _))) = bracket else {
        return Err(Error::RootFinding {
            message: "no sign change of the estimating function on the admissible domain".into(),
            trace,
        });
    };

    let mut theta = 0.5 * (a + b);
    for it in 1..=ROOT_MAX_ITER {
        let (g, slope) = mean_score_and_slope(model, data, w, theta)?;
        trace.push((theta, g));
        if g == 0.0 || (b - a).abs() <= 1e-14 * (1.0 + theta.abs()) {
            return Ok(Preliminary {
                theta: vec![theta],
                iterations: it,
                residual: g.abs(),
            });
        }
        if (g > 0.0) == (ga > 0.0) {
            a = theta;
            ga = g;
        } else {
            b = theta;
        }
        let newton = theta - g / slope;
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (a + b)
        };
        if (next - theta).abs() <= 1e-14 * (1.0 + theta.abs()) {
            let residual = mean_score(model, data, w, next)?.abs();
            return Ok(Preliminary {
                theta: vec![next],
                iterations: it,
                residual,
            });
        }
        theta = next;
    }
    Err(Error::RootFinding {
        message: format!("no convergence after {ROOT_MAX_ITER} safeguarded Newton steps"),
        trace,
    })
}

fn damped_newton(model: &dyn SubLikelihoodModel, data: &Dataset, w: &DVector<f64>) -> Result<Preliminary> {
    let p = model.parameter_dimension();
    let domain = model.theta_domain();
    let start = match (domain.0.is_finite(), domain.1.is_finite()) {
        (true, true) => 0.5 * (domain.0 + domain.1),
        (true, false) => domain.0 + 1.0,
        (false, true) => domain.1 - 1.0,
        (false, false) => 0.0,
    };
    let mut theta = DVector::from_element(p, start);
    let mut trace = Vec::new();
    let eval = |t: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let batch = evaluate_scores(model, t, data, true)?;
        Ok((batch.mean_composite_score(w), batch.mean_composite_gradient(w)?))
    };
    let (mut g, mut jac) = eval(&theta)?;
    for it in 1..=ROOT_MAX_ITER {
        trace.push((theta[0], g.norm()));
        let Some(step) = jac.clone().lu().solve(&g) else {
            return Err(Error::RootFinding {
                message: "singular Jacobian in damped Newton".into(),
                trace,
            });
        };
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-10 {
            let cand = &theta - &step * t;
            if cand.iter().all(|&c| in_domain(c, domain)) {
                if let Ok((gc, jc)) = eval(&cand) {
                    if gc.norm() < g.norm() || gc.norm() == 0.0 {
                        accepted = Some((cand, gc, jc));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        let Some((cand, gc, jc)) = accepted else {
            if g.norm() <= 1e-12 * (1.0 + theta.norm()) {
                return Ok(Preliminary {
                    residual: g.norm(),
                    theta: theta.iter().copied().collect(),
                    iterations: it,
                });
            }
            return Err(Error::RootFinding {
                message: "line search failed to reduce the estimating function".into(),
                trace,
            });
        };
        let moved = (&cand - &theta).norm();
        theta = cand;
        g = gc;
        jac = jc;
        if moved <= 1e-13 * (1.0 + theta.norm()) {
            return Ok(Preliminary {
                residual: g.norm(),
                theta: theta.iter().copied().collect(),
                iterations: it,
            });
        }
    }
    Err(Error::RootFinding {
        message: format!("no convergence after {ROOT_MAX_ITER} damped Newton steps"),
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Update {
    pub theta: Vec<f64>,
    pub iterations: usize,
    /// Norm of the mean weighted score at the returned value.
    pub residual: f64,
}

/// `theta~ + H^{-1} n^{-1} sum_i U(theta~, w; X_i)` with weights frozen at `rule`.
///
/// With `full_iterate` the Newton step is repeated until the mean weighted score drops below
/// `1e-10`.
pub fn one_step_update(
    model: &dyn SubLikelihoodModel,
    data: &Dataset,
    rule: &CompositionRule,
    theta_prelim: &[f64],
    full_iterate: bool,
) -> Result<Update> {
    let w = rule.weights();
    if w.len() != model.sublikelihood_count() {
        return Err(Error::InvalidInput("rule dimension differs from the number of sub-likelihoods".into()));
    }
    let mut theta = DVector::from_row_slice(theta_prelim);
    if w.iter().all(|&x| x == 0.0) {
        return Ok(Update {
            theta: theta_prelim.to_vec(),
            iterations: 0,
            residual: 0.0,
        });
    }
    let max_iter = if full_iterate { 100 } else { 1 };
    for it in 1..=max_iter {
        let batch = evaluate_scores(model, &theta, data, true)?;
        let g = batch.mean_composite_score(&w);
        if full_iterate && g.norm() < 1e-10 {
            return Ok(Update {
                theta: theta.iter().copied().collect(),
                iterations: it - 1,
                residual: g.norm(),
            });
        }
        let h = -batch.mean_composite_gradient(&w)?;
        let step = h.clone().lu().solve(&g).filter(|s| s.iter().all(|v| v.is_finite())).ok_or_else(|| {
            Error::Inference(
                "sensitivity matrix H is singular at the preliminary estimate; try a larger lambda or another preliminary mode"
                    .into(),
            )
        })?;
        theta = step_within_domain(model, &theta, &step);
    }
    let residual = evaluate_scores(model, &theta, data, false)?.mean_composite_score(&w).norm();
    if full_iterate && residual >= 1e-10 {
        log::warn!("full iteration stopped with residual {residual:e}");
    }
    Ok(Update {
        theta: theta.iter().copied().collect(),
        iterations: max_iter,
        residual,
    })
}

/// `theta + step`, halved until it lies inside the model's domain.
fn step_within_domain(model: &dyn SubLikelihoodModel, theta: &DVector<f64>, step: &DVector<f64>) -> DVector<f64> {
    let domain = model.theta_domain();
    let mut t = 1.0;
    loop {
        let cand = theta + step * t;
        if cand.iter().all(|&c| in_domain(c, domain)) || t < 1e-12 {
            if t < 1.0 {
                log::warn!("Newton step left the parameter domain; shortened by a factor {t:e}");
            }
            return cand;
        }
        t *= 0.5;
    }
}

/// Sensitivity, variability and Godambe matrices with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sandwich {
    pub h: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub standard_errors: DVector<f64>,
    /// Whether `K` needed diagonal jitter to be inverted.
    pub jittered: bool,
}

/// `H = -n^{-1} sum_i grad U_w`, `K = n^{-1} sum_i U_w U_w'`, `G = H K^{-1} H`, `SE_r = sqrt((G^{-1})_rr / n)`.
pub fn sandwich(model: &dyn SubLikelihoodModel, data: &Dataset, rule: &CompositionRule, theta: &[f64]) -> Result<Sandwich> {
    let w = rule.weights();
    if w.len() != model.sublikelihood_count() {
        return Err(Error::InvalidInput("rule dimension differs from the number of sub-likelihoods".into()));
    }
    let batch = evaluate_scores(model, &DVector::from_row_slice(theta), data, true)?;
    let n = batch.n() as f64;
    let p = batch.p();
    let h = -batch.mean_composite_gradient(&w)?;
    let mut k = DMatrix::zeros(p, p);
    for u in batch.composite_scores(&w) {
        k += &u * u.transpose();
    }
    k /= n;
    let (k_inv, jittered) = spd_inverse_with_jitter(&k)
        .ok_or_else(|| Error::Inference("variability matrix K is singular; a larger lambda uses fewer scores".into()))?;
    if jittered {
        log::warn!("K needed diagonal jitter to be inverted");
    }
    let g = &h * &k_inv * &h;
    let h_inv = h
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Inference("sensitivity matrix H is singular at the final estimate".into()))?;
    let g_inv = &h_inv * &k * h_inv.transpose();
    let standard_errors = DVector::from_fn(p, |r, _| (g_inv[(r, r)] / n).sqrt());
    if standard_errors.iter().any(|s| !s.is_finite()) {
        return Err(Error::Inference("non-finite standard error".into()));
    }
    Ok(Sandwich {
        h,
        k,
        g,
        standard_errors,
        jittered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub preliminary_iterations: usize,
    pub preliminary_residual: f64,
    pub update_iterations: usize,
    pub update_residual: f64,
    pub k_jittered: bool,
}

/// Final estimate at one penalty level with its sandwich inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub theta_hat: Vec<f64>,
    pub theta_prelim: Vec<f64>,
    /// `None` for the uniform comparison rule.
    pub lambda: Option<f64>,
    pub rule: CompositionRule,
    pub h_hat: Vec<Vec<f64>>,
    pub k_hat: Vec<Vec<f64>>,
    pub g_hat: Vec<Vec<f64>>,
    pub standard_errors: Vec<f64>,
    pub n_active: usize,
    pub n: usize,
    pub diagnostics: Diagnostics,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>]) -> DMatrix<f64> {
    let p = r.len();
    DMatrix::from_fn(p, p, |i, j| r[i][j])
}

impl EstimateReport {
    pub fn h(&self) -> DMatrix<f64> {
        from_rows(&self.h_hat)
    }

    pub fn k(&self) -> DMatrix<f64> {
        from_rows(&self.k_hat)
    }

    pub fn g(&self) -> DMatrix<f64> {
        from_rows(&self.g_hat)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One-step update from `preliminary` under `rule`, then sandwich inference at the result.
pub fn estimate_with_rule(
    model: &dyn SubLikelihoodModel,
    data: &Dataset,
    rule: &CompositionRule,
    lambda: Option<f64>,
    preliminary: &Preliminary,
    full_iterate: bool,
) -> Result<EstimateReport> {
    if rule.n_active() == 0 {
        return Err(Error::Inference(
            "the composition rule has no active sub-likelihoods; choose a smaller lambda".into(),
        ));
    }
    let update = one_step_update(model, data, rule, &preliminary.theta, full_iterate)?;
    let sw = sandwich(model, data, rule, &update.theta)?;
    Ok(EstimateReport {
        theta_hat: update.theta,
        theta_prelim: preliminary.theta.clone(),
        lambda,
        rule: rule.clone(),
        h_hat: rows(&sw.h),
        k_hat: rows(&sw.k),
        g_hat: rows(&sw.g),
        standard_errors: sw.standard_errors.iter().copied().collect(),
        n_active: rule.n_active(),
        n: data.n(),
        diagnostics: Diagnostics {
            preliminary_iterations: preliminary.iterations,
            preliminary_residual: preliminary.residual,
            update_iterations: update.iterations,
            update_residual: update.residual,
            k_jittered: sw.jittered,
        },
    })
}

/// Settings for [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub preliminary: PreliminaryMode,
    pub selection: SelectionRule,
    /// Bypass selection and use this penalty level.
    pub lambda: Option<f64>,
    /// Lower end of the path; defaults to [`default_lambda_min`].
    pub lambda_min: Option<f64>,
    /// Extra grid values for selection.
    pub lambda_grid: Vec<f64>,
    pub full_iterate: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            preliminary: PreliminaryMode::Uniform,
            selection: SelectionRule::default(),
            lambda: None,
            lambda_min: None,
            lambda_grid: Vec::new(),
            full_iterate: false,
        }
    }
}

/// Everything computed by a selection-and-estimation run.
#[derive(Debug, Clone)]
pub struct Fit {
    pub preliminary: Preliminary,
    pub covariance: ScoreCovariance,
    pub path: SolutionPath,
    pub selection: Selection,
    pub report: EstimateReport,
}

/// `0` for a positive definite `J`; otherwise just above the ill-posedness threshold.
pub fn default_lambda_min(j: &ScoreCovariance) -> f64 {
    let (eta, singular) = eta_and_singularity(j);
    if singular {
        1.01 * eta + 1e-9 * j.max_diagonal()
    } else {
        0.0
    }
}

/// Preliminary estimate, `J(theta~)`, solution path, selected penalty, one-step estimate and
/// sandwich inference.
pub fn fit(model: &dyn SubLikelihoodModel, data: &Dataset, options: &FitOptions) -> Result<Fit> {
    options.selection.validate()?;
    let preliminary = preliminary_estimate(model, data, options.preliminary)?;
    let batch = evaluate_scores(model, &DVector::from_row_slice(&preliminary.theta), data, false)?;
    let covariance = empirical_score_covariance(&batch)?;
    let lambda_min = match options.lambda_min {
        Some(l) => l,
        None => {
            let mut l = default_lambda_min(&covariance);
            if let Some(fixed) = options.lambda {
                l = l.min(fixed);
            }
            l
        }
    };
    let path = solution_path(&covariance, lambda_min)?;
    let selection = match options.lambda {
        Some(lambda) => {
            let rule = path
                .rule_at(&covariance, lambda)
                .ok_or_else(|| Error::InvalidInput(format!("lambda {lambda} lies below the path end {lambda_min}")))?;
            Selection {
                lambda,
                phi: path.active_trace(&rule) / path.total_trace(),
                rule,
                warning: false,
            }
        }
        None => options.selection.apply(&path, &options.lambda_grid)?,
    };
    let report = estimate_with_rule(
        model,
        data,
        &selection.rule,
        Some(selection.lambda),
        &preliminary,
        options.full_iterate,
    )?;
    Ok(Fit {
        preliminary,
        covariance,
        path,
        selection,
        report,
    })
}

/// The `count` largest knot values strictly below the start of the path.
pub fn report_grid(path: &SolutionPath, count: usize) -> Vec<f64> {
    path.knots
        .iter()
        .map(|k| k.lambda)
        .filter(|&l| l < path.lambda_start && l >= path.lambda_min)
        .take(count)
        .collect()
}

/// Estimates along a decreasing sequence of penalty levels, reusing the preliminary estimate.
pub fn estimate_along_path(
    model: &dyn SubLikelihoodModel,
    data: &Dataset,
    fit: &Fit,
    lambdas: &[f64],
    full_iterate: bool,
) -> Result<Vec<EstimateReport>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let rule = fit
                .path
                .rule_at(&fit.covariance, lambda)
                .ok_or_else(|| Error::InvalidInput(format!("lambda {lambda} lies below the path end")))?;
            estimate_with_rule(model, data, &rule, Some(lambda), &fit.preliminary, full_iterate)
        })
        .collect()
}

/// Comparison row with unit weights on every sub-likelihood.
pub fn uniform_report(model: &dyn SubLikelihoodModel, data: &Dataset, fit: &Fit, full_iterate: bool) -> Result<EstimateReport> {
    let rule = CompositionRule::uniform(&fit.covariance);
    estimate_with_rule(model, data, &rule, None, &fit.preliminary, full_iterate)
}

/// `(w' diag J)^2 / (w' J w)`: Godambe information of the composite score when each
/// sub-likelihood satisfies the information identity.
pub fn godambe_information(j: &ScoreCovariance, w: &DVector<f64>) -> f64 {
    let h = w.dot(j.diagonal());
    let k = w.dot(&(j.matrix() * w));
    if k > 0.0 {
        h * h / k
    } else {
        0.0
    }
}

/// Godambe over Fisher information for a one-parameter built-in model at `theta`.
pub fn asymptotic_relative_efficiency(model: &ModelSpec, theta: f64, rule: &CompositionRule) -> Result<f64> {
    let j = population_score_covariance(model, theta)?;
    let fisher = model.fisher_information(theta)?;
    Ok(godambe_information(&j, &rule.weights()) / fisher)
}

/// Efficiency of `m` exchangeable scores relative to `m -> inf`: `rho m / (rho (m - 1) + 1)`.
pub fn exchangeable_are(rho: f64, m: usize) -> f64 {
    let m = m as f64;
    rho * m / (rho * (m - 1.0) + 1.0)
}

/// Optimal common weight `(1 - lambda) / (rho (m - 1) + 1)` for `lambda < 1`, else 0.
pub fn exchangeable_weight(rho: f64, m: usize, lambda: f64) -> f64 {
    if lambda < 1.0 {
        (1.0 - lambda) / (rho * (m as f64 - 1.0) + 1.0)
    } else {
        0.0
    }
}
