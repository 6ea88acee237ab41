//! Data-driven choice of the penalty level along a computed solution path.
//!
//! The candidate grid is the set of path knots, optionally augmented by extra `lambda` values
//! interpolated from the path. Supports are constant between knots, so trace ratios only
//! change at knots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::{CompositionRule, SolutionPath};

pub const DEFAULT_TAU: f64 = 0.9;
pub const DEFAULT_DELTA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "threshold", rename_all = "kebab-case")]
pub enum SelectionRule {
    /// Largest `lambda` whose active set explains more than `tau` of `tr(J)`.
    TraceRatio(f64),
    /// Largest `lambda` whose active trace exceeds `delta` times that of the next smaller grid value.
    RelativeTolerance(f64),
}

impl Default for SelectionRule {
    fn default() -> Self {
        SelectionRule::TraceRatio(DEFAULT_TAU)
    }
}

impl SelectionRule {
    pub fn threshold(&self) -> f64 {
        match *self {
            SelectionRule::TraceRatio(t) | SelectionRule::RelativeTolerance(t) => t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.threshold();
        let ok = match self {
            SelectionRule::TraceRatio(_) => t > 0.0 && t <= 1.0,
            SelectionRule::RelativeTolerance(_) => t > 0.0 && t < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("selection threshold {t} out of range")))
        }
    }

    pub fn apply(&self, path: &SolutionPath, extra: &[f64]) -> Result<Selection> {
        match *self {
            SelectionRule::TraceRatio(tau) => select_lambda_trace_on_grid(path, tau, extra),
            SelectionRule::RelativeTolerance(delta) => select_lambda_relative_on_grid(path, delta, extra),
        }
    }
}

/// Outcome of a selection rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub lambda: f64,
    pub rule: CompositionRule,
    /// `tr(J_A) / tr(J)` for the selected support.
    pub phi: f64,
    /// Set when no grid value met the threshold and the smallest one was returned.
    pub warning: bool,
}

/// Grid values in decreasing order with their rules.
pub fn candidate_grid(path: &SolutionPath, extra: &[f64]) -> Result<Vec<CompositionRule>> {
    if path.knots.is_empty() {
        return Err(Error::InvalidInput("solution path has no knots".into()));
    }
    let mut grid: Vec<CompositionRule> = path.knots.iter().map(|k| k.rule.clone()).collect();
    for &lambda in extra {
        if !lambda.is_finite() || lambda < path.lambda_min {
            return Err(Error::InvalidInput(format!(
                "extra grid value {lambda} outside the path range [{}, inf)",
                path.lambda_min
            )));
        }
        if grid.iter().any(|r| r.lambda == lambda) {
            continue;
        }
        let w = path.weights_at(lambda).expect("lambda within path range");
        let mut rule = CompositionRule::from_dense_unscored(lambda, &w);
        rule.objective_value = f64::NAN;
        grid.push(rule);
    }
    grid.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
    Ok(grid)
}

fn total_trace(path: &SolutionPath) -> Result<f64> {
    let total = path.total_trace();
    if !(total > 0.0) {
        return Err(Error::DegenerateCovariance("tr(J) = 0".into()));
    }
    Ok(total)
}

/// Trace-ratio rule on the knots of `path`.
pub fn select_lambda_trace(path: &SolutionPath, tau: f64) -> Result<Selection> {
    select_lambda_trace_on_grid(path, tau, &[])
}

pub fn select_lambda_trace_on_grid(path: &SolutionPath, tau: f64, extra: &[f64]) -> Result<Selection> {
    SelectionRule::TraceRatio(tau).validate()?;
    let total = total_trace(path)?;
    let grid = candidate_grid(path, extra)?;
    for rule in &grid {
        let phi = path.active_trace(rule) / total;
        if phi > tau {
            return Ok(Selection {
                lambda: rule.lambda,
                rule: rule.clone(),
                phi,
                warning: false,
            });
        }
    }
    let last = grid.last().expect("non-empty grid").clone();
    log::warn!("no grid value reaches trace ratio {tau}; using the smallest lambda {:e}", last.lambda);
    Ok(Selection {
        lambda: last.lambda,
        phi: path.active_trace(&last) / total,
        rule: last,
        warning: true,
    })
}

/// Relative-tolerance rule on the knots of `path`.
pub fn select_lambda_relative(path: &SolutionPath, delta: f64) -> Result<Selection> {
    select_lambda_relative_on_grid(path, delta, &[])
}

pub fn select_lambda_relative_on_grid(path: &SolutionPath, delta: f64, extra: &[f64]) -> Result<Selection> {
    SelectionRule::RelativeTolerance(delta).validate()?;
    let total = total_trace(path)?;
    let grid = candidate_grid(path, extra)?;
    let traces: Vec<f64> = grid.iter().map(|r| path.active_trace(r)).collect();
    let last = grid.len() - 1;
    // An empty support has ratio 0 and is never accepted unless it is the only grid value.
    let chosen = (0..=last)
        .find(|&i| {
            if i == last {
                return true;
            }
            traces[i] > 0.0 && traces[i] / traces[i + 1] > delta
        })
        .expect("last index always qualifies");
    Ok(Selection {
        lambda: grid[chosen].lambda,
        phi: traces[chosen] / total,
        rule: grid[chosen].clone(),
        warning: false,
    })
}
