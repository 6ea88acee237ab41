//! Minimization of the penalized score distance
//! `1/2 w'Jw - w' diag(J) + lambda |w|_1` over composition rules `w`.
//!
//! The default route is an exact homotopy in `lambda`: starting from
//! `lambda_start = max_j J_jj`, where `w = 0`, the active set grows (and occasionally
//! shrinks) at knots where a KKT bound becomes tight; between knots the active weights
//! solve `J_E w_E = diag(J_E) - lambda sign(w_E)` and move linearly in `lambda`.

mod cd;
mod cholesky;
mod homotopy;
mod oracle;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{refine, submatrix, subvector};
use crate::stats::{eta_and_singularity, ScoreCovariance};

pub use cd::coordinate_descent;
pub use homotopy::{solution_path, solution_path_with, PathEvent, PathKnot, SolutionPath};
pub use oracle::brute_force_oracle;

/// A sparse weight vector with its penalty level and sign pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRule {
    pub lambda: f64,
    /// Number of sub-likelihoods `m`.
    pub dimension: usize,
    /// Indices of nonzero weights, ascending.
    pub active_set: Vec<usize>,
    /// Weights on `active_set`, same order.
    pub values: Vec<f64>,
    pub signs: Vec<i8>,
    pub objective_value: f64,
}

impl CompositionRule {
    /// Builds a rule from dense weights; exact zeros are inactive.
    pub fn from_dense(j: &ScoreCovariance, lambda: f64, weights: &DVector<f64>) -> Self {
        Self {
            objective_value: objective(j, lambda, weights),
            ..Self::from_dense_unscored(lambda, weights)
        }
    }

    pub(crate) fn from_dense_unscored(lambda: f64, weights: &DVector<f64>) -> Self {
        let active_set: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] != 0.0).collect();
        let values: Vec<f64> = active_set.iter().map(|&i| weights[i]).collect();
        let signs = values.iter().map(|v| if *v > 0.0 { 1 } else { -1 }).collect();
        Self {
            lambda,
            dimension: weights.len(),
            objective_value: 0.0,
            active_set,
            values,
            signs,
        }
    }

    pub fn zero(j: &ScoreCovariance, lambda: f64) -> Self {
        Self::from_dense(j, lambda, &DVector::zeros(j.dim()))
    }

    /// Uniform rule `w_j = 1` (lambda reported as 0).
    pub fn uniform(j: &ScoreCovariance) -> Self {
        Self::from_dense(j, 0.0, &DVector::from_element(j.dim(), 1.0))
    }

    pub fn weights(&self) -> DVector<f64> {
        let mut w = DVector::zeros(self.dimension);
        for (&i, &v) in self.active_set.iter().zip(&self.values) {
            w[i] = v;
        }
        w
    }

    pub fn weight(&self, index: usize) -> f64 {
        self.active_set
            .binary_search(&index)
            .map(|pos| self.values[pos])
            .unwrap_or(0.0)
    }

    pub fn n_active(&self) -> usize {
        self.active_set.len()
    }
}

/// `1/2 w'Jw - w' diag(J) + lambda |w|_1`.
pub fn objective(j: &ScoreCovariance, lambda: f64, w: &DVector<f64>) -> f64 {
    0.5 * w.dot(&(j.matrix() * w)) - w.dot(j.diagonal()) + lambda * w.lp_norm(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    Homotopy,
    CoordinateDescent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub method: SolverMethod,
    /// Retry with coordinate descent when the homotopy reports a conditioning error.
    pub coordinate_descent_fallback: bool,
    /// KKT tolerance relative to `max diag(J)`.
    pub kkt_rtol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: SolverMethod::Homotopy,
            coordinate_descent_fallback: true,
            kkt_rtol: 1e-9,
        }
    }
}

/// Minimizer of the penalized criterion at a single `lambda`.
pub fn solve_weights(j: &ScoreCovariance, lambda: f64) -> Result<CompositionRule> {
    solve_weights_with(j, lambda, &SolverOptions::default())
}

pub fn solve_weights_with(j: &ScoreCovariance, lambda: f64, options: &SolverOptions) -> Result<CompositionRule> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("lambda = {lambda} must be finite and non-negative")));
    }
    if lambda >= j.max_diagonal() {
        return Ok(CompositionRule::zero(j, lambda));
    }
    let tol = options.kkt_rtol * j.max_diagonal();
    let (eta, singular) = eta_and_singularity(j);
    if singular && lambda <= eta {
        return Err(Error::IllPosed { lambda, eta });
    }

    let homotopy_result = match options.method {
        SolverMethod::Homotopy => homotopy::solve_at(j, lambda),
        SolverMethod::CoordinateDescent => Err(Error::Conditioning { active: Vec::new() }),
    };
    let rule = match homotopy_result {
        Ok(rule) => rule,
        Err(Error::Conditioning { active }) => {
            if options.method == SolverMethod::Homotopy && !options.coordinate_descent_fallback {
                return Err(Error::Conditioning { active });
            }
            if options.method == SolverMethod::Homotopy {
                log::warn!("homotopy hit a singular active set {active:?}; falling back to coordinate descent");
            }
            let w = coordinate_descent(j, lambda, None)?;
            CompositionRule::from_dense(j, lambda, &w)
        }
        Err(e) => return Err(e),
    };
    // Polish on the reported support, then fall back to warm-started coordinate descent.
    if let Ok(w) = active_set_refit(j, &rule.active_set, &rule.signs, lambda) {
        let polished = CompositionRule::from_dense(j, lambda, &w);
        if polished.active_set == rule.active_set && kkt_verify(j, lambda, &polished, tol) {
            return Ok(polished);
        }
    }
    if kkt_verify(j, lambda, &rule, tol) {
        return Ok(rule);
    }
    let w = coordinate_descent(j, lambda, Some(&rule.weights()))?;
    let refined = CompositionRule::from_dense(j, lambda, &w);
    if kkt_verify(j, lambda, &refined, tol) {
        Ok(refined)
    } else {
        Err(Error::Conditioning {
            active: refined.active_set,
        })
    }
}

/// KKT check: active `|(Jw)_j - J_jj + lambda sign(w_j)| <= tol`, inactive `|(Jw)_j - J_jj| <= lambda + tol`.
pub fn kkt_verify(j: &ScoreCovariance, lambda: f64, rule: &CompositionRule, tol: f64) -> bool {
    if rule.dimension != j.dim() {
        return false;
    }
    let w = rule.weights();
    let grad = j.matrix() * &w - j.diagonal();
    (0..j.dim()).all(|i| {
        if w[i] != 0.0 {
            (grad[i] + lambda * w[i].signum()).abs() <= tol
        } else {
            grad[i].abs() <= lambda + tol
        }
    })
}

/// Closed-form weights on a fixed active set and sign pattern:
/// `w_E = J_E^{-1} [diag(J_E) - lambda sign]`, zero elsewhere.
pub fn active_set_refit(j: &ScoreCovariance, active: &[usize], signs: &[i8], lambda: f64) -> Result<DVector<f64>> {
    if active.len() != signs.len() {
        return Err(Error::InvalidInput("active set and sign pattern differ in length".into()));
    }
    if let Some(&bad) = active.iter().find(|&&i| i >= j.dim()) {
        return Err(Error::InvalidInput(format!("active index {bad} out of range")));
    }
    let mut w = DVector::zeros(j.dim());
    if active.is_empty() {
        return Ok(w);
    }
    let sub = submatrix(j.matrix(), active);
    let rhs = subvector(j.diagonal(), active) - DVector::from_iterator(signs.len(), signs.iter().map(|&s| lambda * s as f64));
    let chol = sub.clone().cholesky().ok_or_else(|| Error::Conditioning { active: active.to_vec() })?;
    let l = chol.l_dirty();
    let max_diag = j.max_diagonal();
    if (0..active.len()).any(|i| l[(i, i)].powi(2) <= 1e-13 * max_diag) {
        return Err(Error::Conditioning { active: active.to_vec() });
    }
    let sol = refine(&sub, &rhs, chol.solve(&rhs), |r| chol.solve(r));
    for (pos, &i) in active.iter().enumerate() {
        w[i] = sol[pos];
    }
    Ok(w)
}
