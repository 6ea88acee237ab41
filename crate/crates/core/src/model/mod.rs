//! Sub-likelihood models: per-observation score matrices and their gradients.

mod builtin;
mod config;
mod data;
mod pairwise;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};

pub use builtin::{ModelKind, ModelKindTag, ModelSpec};
pub use config::ModelConfig;
pub use data::Dataset;
pub use pairwise::{
    gravity_covariance, gravity_distances, pair_index, pair_list, pairwise_normal_log_density,
    pairwise_normal_score, pairwise_normal_score_derivative, validate_sites, Site,
};

/// A family of `m` sub-likelihoods for a `p`-dimensional parameter.
///
/// Implementors return the `p x m` score matrix `M(theta; x)` for one observation; column `j`
/// is the gradient in `theta` of the `j`-th sub-log-density. Score gradients are optional;
/// when absent, [`evaluate_scores`] differentiates the scores numerically.
pub trait SubLikelihoodModel: Send + Sync {
    fn parameter_dimension(&self) -> usize;
    fn sublikelihood_count(&self) -> usize;
    fn variate_dimension(&self) -> usize;

    /// Per-coordinate admissible interval for `theta`, used to bracket roots.
    fn theta_domain(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn scores(&self, theta: &DVector<f64>, x: &[f64]) -> Result<DMatrix<f64>>;

    /// `m` matrices, each `p x p`, entry `(s, r)` = d U_{j,s} / d theta_r.
    fn score_gradients(&self, _theta: &DVector<f64>, _x: &[f64]) -> Option<Result<Vec<DMatrix<f64>>>> {
        None
    }

    /// The built-in specification behind this model, if any.
    fn builtin(&self) -> Option<&ModelSpec> {
        None
    }
}

/// Scores of every observation at a fixed `theta`.
#[derive(Debug, Clone)]
pub struct ScoreBatch {
    pub theta: DVector<f64>,
    /// One `p x m` matrix per observation.
    pub scores: Vec<DMatrix<f64>>,
    /// Per observation, `m` gradient matrices of size `p x p`.
    pub gradients: Option<Vec<Vec<DMatrix<f64>>>>,
}

impl ScoreBatch {
    pub fn n(&self) -> usize {
        self.scores.len()
    }

    pub fn p(&self) -> usize {
        self.theta.len()
    }

    pub fn m(&self) -> usize {
        self.scores.first().map(|s| s.ncols()).unwrap_or(0)
    }

    /// Stacks the observations into an `(n p) x m` matrix.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (n, p, m) = (self.n(), self.p(), self.m());
        let mut out = DMatrix::zeros(n * p, m);
        for (i, s) in self.scores.iter().enumerate() {
            out.rows_mut(i * p, p).copy_from(s);
        }
        out
    }

    /// Composite score `M(theta; X_i) w` per observation.
    pub fn composite_scores(&self, weights: &DVector<f64>) -> Vec<DVector<f64>> {
        self.scores.iter().map(|s| s * weights).collect()
    }

    /// `n^{-1} sum_i M(theta; X_i) w`.
    pub fn mean_composite_score(&self, weights: &DVector<f64>) -> DVector<f64> {
        let mut acc = DVector::zeros(self.p());
        for s in &self.scores {
            acc += s * weights;
        }
        acc / self.n() as f64
    }

    /// `n^{-1} sum_i sum_j w_j grad U_j(theta; X_i)`; requires gradients.
    pub fn mean_composite_gradient(&self, weights: &DVector<f64>) -> Result<DMatrix<f64>> {
        let grads = self
            .gradients
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("score batch was evaluated without gradients".into()))?;
        let p = self.p();
        let mut acc = DMatrix::zeros(p, p);
        for per_obs in grads {
            for (j, g) in per_obs.iter().enumerate() {
                if weights[j] != 0.0 {
                    acc += g * weights[j];
                }
            }
        }
        Ok(acc / self.n() as f64)
    }
}

fn fd_step(theta: f64) -> f64 {
    f64::max(1e-6, 1e-8 * theta.abs())
}

fn numerical_gradients(model: &dyn SubLikelihoodModel, theta: &DVector<f64>, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    let (p, m) = (model.parameter_dimension(), model.sublikelihood_count());
    let mut grads = vec![DMatrix::zeros(p, p); m];
    for r in 0..p {
        let h = fd_step(theta[r]);
        let mut plus = theta.clone();
        plus[r] += h;
        let mut minus = theta.clone();
        minus[r] -= h;
        let diff = (model.scores(&plus, x)? - model.scores(&minus, x)?) / (2.0 * h);
        for (j, g) in grads.iter_mut().enumerate() {
            for s in 0..p {
                g[(s, r)] = diff[(s, j)];
            }
        }
    }
    Ok(grads)
}

/// Evaluates `M(theta; X_i)` for every observation, optionally with score gradients.
pub fn evaluate_scores(
    model: &dyn SubLikelihoodModel,
    theta: &DVector<f64>,
    data: &Dataset,
    with_gradients: bool,
) -> Result<ScoreBatch> {
    let (p, m) = (model.parameter_dimension(), model.sublikelihood_count());
    if theta.len() != p {
        return Err(Error::InvalidInput(format!("theta has length {}, model expects {p}", theta.len())));
    }
    if data.d() != model.variate_dimension() {
        return Err(Error::InvalidInput(format!(
            "data has {} columns, model expects {}",
            data.d(),
            model.variate_dimension()
        )));
    }
    let per_obs: Vec<(DMatrix<f64>, Option<Vec<DMatrix<f64>>>)> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let x = data.row(i);
            let s = model.scores(theta, &x)?;
            if s.nrows() != p || s.ncols() != m {
                return Err(Error::InvalidModel(format!(
                    "score matrix is {}x{}, expected {p}x{m}",
                    s.nrows(),
                    s.ncols()
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("scores of observation {i}")));
            }
            let g = if with_gradients {
                let g = match model.score_gradients(theta, &x) {
                    Some(g) => g?,
                    None => numerical_gradients(model, theta, &x)?,
                };
                if g.len() != m || g.iter().any(|gj| gj.iter().any(|v| !v.is_finite())) {
                    return Err(Error::NonFinite(format!("score gradients of observation {i}")));
                }
                Some(g)
            } else {
                None
            };
            Ok((s, g))
        })
        .collect::<Result<_>>()?;

    let mut scores = Vec::with_capacity(per_obs.len());
    let mut gradients = with_gradients.then(|| Vec::with_capacity(per_obs.len()));
    for (s, g) in per_obs {
        scores.push(s);
        if let (Some(all), Some(g)) = (gradients.as_mut(), g) {
            all.push(g);
        }
    }
    Ok(ScoreBatch {
        theta: theta.clone(),
        scores,
        gradients,
    })
}

type ScoreFn = dyn Fn(&DVector<f64>, &[f64]) -> DMatrix<f64> + Send + Sync;
type GradientFn = dyn Fn(&DVector<f64>, &[f64]) -> Vec<DMatrix<f64>> + Send + Sync;

/// A user-supplied model defined by closures.
pub struct UserModel {
    p: usize,
    m: usize,
    d: usize,
    domain: (f64, f64),
    scores: Box<ScoreFn>,
    gradients: Option<Box<GradientFn>>,
}

impl UserModel {
    pub fn new(
        p: usize,
        m: usize,
        d: usize,
        scores: impl Fn(&DVector<f64>, &[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            p,
            m,
            d,
            domain: (f64::NEG_INFINITY, f64::INFINITY),
            scores: Box::new(scores),
            gradients: None,
        }
    }

    pub fn with_gradients(
        mut self,
        gradients: impl Fn(&DVector<f64>, &[f64]) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        self.gradients = Some(Box::new(gradients));
        self
    }

    pub fn with_domain(mut self, lo: f64, hi: f64) -> Self {
        self.domain = (lo, hi);
        self
    }
}

impl SubLikelihoodModel for UserModel {
    fn parameter_dimension(&self) -> usize {
        self.p
    }
    fn sublikelihood_count(&self) -> usize {
        self.m
    }
    fn variate_dimension(&self) -> usize {
        self.d
    }
    fn theta_domain(&self) -> (f64, f64) {
        self.domain
    }
    fn scores(&self, theta: &DVector<f64>, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok((self.scores)(theta, x))
    }
    fn score_gradients(&self, theta: &DVector<f64>, x: &[f64]) -> Option<Result<Vec<DMatrix<f64>>>> {
        self.gradients.as_ref().map(|g| Ok(g(theta, x)))
    }
}
