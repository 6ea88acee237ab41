#![allow(dead_code)]

pub mod invariants;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sparsecl::model::evaluate_scores;
use sparsecl::nalgebra::{DMatrix, DVector};
use sparsecl::sim::fig2_distances;
use sparsecl::stats::empirical_score_covariance;
use sparsecl::{ModelSpec, ScoreCovariance};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n^{-1} sum_i s_i s_i'` for `n` standard normal score vectors in dimension `m` (rank `min(n, m)`).
pub fn random_gram(m: usize, n: usize, rng: &mut impl Rng) -> ScoreCovariance {
    let s = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    ScoreCovariance::from_matrix(s.transpose() * &s / n as f64).unwrap()
}

/// A penalty level strictly inside the well-posed range, away from its ends.
pub fn admissible_lambda(j: &ScoreCovariance, rng: &mut impl Rng) -> f64 {
    let eta = sparsecl::stats::eta_threshold(j);
    let top = j.max_diagonal();
    let u: f64 = rng.random_range(0.05..0.95);
    eta + u * (top - eta)
}

/// Empirical score covariance of the pairwise model on the `d`-point line at `theta`.
pub fn pairwise_gram(d: usize, n: usize, theta: f64, seed: u64) -> (ModelSpec, ScoreCovariance) {
    let spec = ModelSpec::pairwise(fig2_distances(d)).unwrap();
    let data = spec.sample(theta, n, &mut rng(seed)).unwrap();
    let batch = evaluate_scores(&spec, &DVector::from_element(1, theta), &data, false).unwrap();
    let j = empirical_score_covariance(&batch).unwrap();
    (spec, j)
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax()
}

/// Weights from the active-set closed form `J_E^{-1}(diag J_E - lambda sign(w_E))`.
pub fn closed_form(j: &ScoreCovariance, rule: &sparsecl::CompositionRule) -> DVector<f64> {
    let e = &rule.active_set;
    let mut w = DVector::zeros(j.dim());
    if e.is_empty() {
        return w;
    }
    let je = DMatrix::from_fn(e.len(), e.len(), |a, b| j.matrix()[(e[a], e[b])]);
    let rhs = DVector::from_fn(e.len(), |a, _| j.diagonal()[e[a]] - rule.lambda * rule.signs[a] as f64);
    let lu = je.clone().lu();
    let mut sol = lu.solve(&rhs).expect("active block is invertible");
    // Two refinement sweeps with extended-precision residuals keep ill-conditioned blocks accurate.
    for _ in 0..2 {
        let r = DVector::from_fn(e.len(), |a, _| {
            rhs[a] - sparsecl::linalg::dot2(je.row(a).iter().copied(), sol.iter().copied())
        });
        sol += lu.solve(&r).expect("active block is invertible");
    }
    for (a, &i) in e.iter().enumerate() {
        w[i] = sol[a];
    }
    w
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
