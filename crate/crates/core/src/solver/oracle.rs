use nalgebra::DVector;

use super::CompositionRule;
use crate::error::{Error, Result};
use crate::linalg::{numerical_rank, refine, submatrix, subvector};
use crate::stats::ScoreCovariance;

/// Largest `m` accepted by the exhaustive search.
pub const ORACLE_MAX_DIM: usize = 12;

/// Exhaustive minimizer over all supports and sign patterns.
///
/// For every support `E` with `J_E` invertible and every sign vector, the closed form
/// `w_E = J_E^{-1}(diag J_E - lambda s)` is kept when its signs agree with `s` and the full KKT
/// conditions hold; the feasible candidate with the smallest criterion wins. Intended as a
/// test oracle for `m <= 12`.
pub fn brute_force_oracle(j: &ScoreCovariance, lambda: f64) -> Result<CompositionRule> {
    let m = j.dim();
    if m > ORACLE_MAX_DIM {
        return Err(Error::InvalidInput(format!("oracle limited to m <= {ORACLE_MAX_DIM}, got {m}")));
    }
    let jm = j.matrix();
    let d = j.diagonal();
    let tol = 1e-9 * j.max_diagonal().max(f64::MIN_POSITIVE);
    let mut best: Option<CompositionRule> = None;

    for mask in 0u32..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|&i| mask & (1 << i) != 0).collect();
        let k = support.len();
        let sub = submatrix(jm, &support);
        let factor = if k == 0 {
            None
        } else {
            if numerical_rank(&sub) < k {
                continue;
            }
            let lu = sub.clone().lu();
            if !lu.is_invertible() {
                continue;
            }
            Some(lu)
        };
        let d_sub = subvector(d, &support);
        for signs in 0u32..(1 << k) {
            let s = DVector::from_iterator(k, (0..k).map(|b| if signs & (1 << b) != 0 { -1.0 } else { 1.0 }));
            let mut w = DVector::zeros(m);
            if let Some(lu) = &factor {
                let rhs = &d_sub - &s * lambda;
                let solve = |r: &DVector<f64>| lu.solve(r).unwrap_or_else(|| DVector::zeros(k));
                let w_sub = refine(&sub, &rhs, solve(&rhs), solve);
                if (0..k).any(|b| w_sub[b] * s[b] <= 0.0) {
                    continue;
                }
                for (b, &i) in support.iter().enumerate() {
                    w[i] = w_sub[b];
                }
            }
            let grad = jm * &w - d;
            let feasible = (0..m).all(|i| {
                if w[i] != 0.0 {
                    (grad[i] + lambda * w[i].signum()).abs() <= tol
                } else {
                    grad[i].abs() <= lambda + tol
                }
            });
            if !feasible {
                continue;
            }
            let rule = CompositionRule::from_dense(j, lambda, &w);
            if best.as_ref().is_none_or(|b| rule.objective_value < b.objective_value) {
                best = Some(rule);
            }
        }
    }
    best.ok_or(Error::IllPosed {
        lambda,
        eta: crate::stats::eta_threshold(j),
    })
}
