//! Score covariance matrices and the quantities derived from them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rank_threshold, sym_eigen_desc};
use crate::model::{evaluate_scores, ModelKind, SubLikelihoodModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum CovarianceSource {
    Empirical { n: usize },
    Population,
    MonteCarlo { n: usize, seed: u64 },
    Supplied,
}

/// The `m x m` matrix `J(theta) = E{M' M}` or its empirical counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCovariance {
    matrix: DMatrix<f64>,
    diagonal: DVector<f64>,
    source: CovarianceSource,
    theta: DVector<f64>,
}

impl ScoreCovariance {
    /// Validates symmetry (relative 1e-12) and a non-negative diagonal, then stores the
    /// exactly symmetrized matrix.
    pub fn new(matrix: DMatrix<f64>, source: CovarianceSource, theta: DVector<f64>) -> Result<Self> {
        let m = matrix.nrows();
        if m == 0 || matrix.ncols() != m {
            return Err(Error::InvalidInput("score covariance must be square and non-empty".into()));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("score covariance".into()));
        }
        let scale = matrix.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        for j in 0..m {
            for k in 0..j {
                if (matrix[(j, k)] - matrix[(k, j)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidInput(format!("score covariance is not symmetric at ({j}, {k})")));
                }
            }
        }
        let matrix = crate::linalg::symmetrized(&matrix);
        if let Some(j) = (0..m).find(|&j| matrix[(j, j)] < 0.0) {
            return Err(Error::InvalidInput(format!("negative diagonal entry at {j}")));
        }
        let diagonal = matrix.diagonal();
        Ok(Self {
            matrix,
            diagonal,
            source,
            theta,
        })
    }

    /// Wraps a caller-supplied matrix.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        Self::new(matrix, CovarianceSource::Supplied, DVector::zeros(0))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn diagonal(&self) -> &DVector<f64> {
        &self.diagonal
    }

    pub fn source(&self) -> CovarianceSource {
        self.source
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal.sum()
    }

    pub fn max_diagonal(&self) -> f64 {
        self.diagonal.iter().copied().fold(0.0, f64::max)
    }

    /// Number of observations behind an empirical matrix.
    pub fn sample_size(&self) -> Option<usize> {
        match self.source {
            CovarianceSource::Empirical { n } | CovarianceSource::MonteCarlo { n, .. } => Some(n),
            _ => None,
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        for i in 0..self.dim() {
            wtr.write_record(self.matrix.row(i).iter().map(|x| format!("{x:e}")))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `n^{-1} sum_i M_i' M_i` from a batch of score matrices.
pub fn empirical_score_covariance(batch: &crate::model::ScoreBatch) -> Result<ScoreCovariance> {
    if batch.n() == 0 {
        return Err(Error::InvalidInput("empty score batch".into()));
    }
    let stacked = batch.stacked();
    let j = stacked.tr_mul(&stacked) / batch.n() as f64;
    ScoreCovariance::new(j, CovarianceSource::Empirical { n: batch.n() }, batch.theta.clone())
}

/// Exact `J(theta)` for built-in Gaussian models, with data distributed at `theta`.
///
/// Location kinds use `Sigma_jk / (sigma_j^2 sigma_k^2)`. Pairwise kinds write each score as a
/// quadratic form `z' A_j z + c_j` in standardized variables and use the Gaussian product
/// rule `cov(z'Az, z'Bz) = 2 tr(A R B R)`.
pub fn population_score_covariance(model: &dyn SubLikelihoodModel, theta: f64) -> Result<ScoreCovariance> {
    let spec = model
        .builtin()
        .ok_or_else(|| Error::Unsupported("population covariance needs a built-in model; use the Monte Carlo route".into()))?;
    let theta_vec = DVector::from_element(1, theta);
    let matrix = match spec.kind() {
        ModelKind::LocationHeterogeneous { .. } | ModelKind::ExchangeableLocation { .. } => {
            let cov = spec.covariance(theta)?;
            let var = spec.score_variances().expect("location kind");
            DMatrix::from_fn(cov.nrows(), cov.ncols(), |j, k| cov[(j, k)] / (var[j] * var[k]))
        }
        ModelKind::PairwiseExpCovariance { distances } | ModelKind::GravityField { distances, .. } => {
            pairwise_population_covariance(theta, distances, spec.pairs())?
        }
    };
    ScoreCovariance::new(matrix, CovarianceSource::Population, theta_vec)
}

struct QuadraticScore {
    a: usize,
    b: usize,
    /// Coefficient of `z_a^2` and `z_b^2`.
    square: f64,
    /// Coefficient of `z_a z_b`.
    cross: f64,
    constant: f64,
}

impl QuadraticScore {
    fn new(theta: f64, a: usize, b: usize, delta: f64) -> Result<Self> {
        let arg = theta * delta;
        if !(arg > 0.0) {
            return Err(Error::Domain {
                pair: Some((a, b)),
                message: format!("theta * delta = {arg} must be positive"),
            });
        }
        let rho = (-arg).exp();
        let s = 1.0 - rho * rho;
        Ok(Self {
            a,
            b,
            square: delta * rho * rho / (s * s),
            cross: delta * rho * (-2.0 * rho * rho / (s * s) - 1.0 / s),
            constant: -delta * rho * rho / s,
        })
    }

    /// Entries of the symmetric matrix `A` on its 2x2 support.
    fn entries(&self) -> [(usize, usize, f64); 4] {
        let half = 0.5 * self.cross;
        [
            (self.a, self.a, self.square),
            (self.b, self.b, self.square),
            (self.a, self.b, half),
            (self.b, self.a, half),
        ]
    }

    fn mean(&self, r: &DMatrix<f64>) -> f64 {
        self.entries().iter().map(|&(u, v, x)| x * r[(v, u)]).sum::<f64>() + self.constant
    }
}

fn pairwise_population_covariance(theta: f64, distances: &DMatrix<f64>, pairs: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let d = distances.nrows();
    let r = DMatrix::from_fn(d, d, |j, k| if j == k { 1.0 } else { (-theta * distances[(j, k)]).exp() });
    let forms: Vec<QuadraticScore> = pairs
        .iter()
        .map(|&(a, b)| QuadraticScore::new(theta, a, b, distances[(a, b)]))
        .collect::<Result<_>>()?;
    let means: Vec<f64> = forms.iter().map(|f| f.mean(&r)).collect();
    let m = forms.len();
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|j| {
            let ej = forms[j].entries();
            (j..m)
                .map(|k| {
                    let ek = forms[k].entries();
                    let mut tr = 0.0;
                    for &(u, v, x) in &ej {
                        for &(s, t, y) in &ek {
                            tr += x * r[(v, s)] * y * r[(t, u)];
                        }
                    }
                    2.0 * tr + means[j] * means[k]
                })
                .collect()
        })
        .collect();
    let mut out = DMatrix::zeros(m, m);
    for (j, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            out[(j, j + off)] = v;
            out[(j + off, j)] = v;
        }
    }
    Ok(out)
}

/// Seeded Monte Carlo estimate of `J(theta)` from `n` draws of a built-in model.
pub fn monte_carlo_score_covariance(model: &dyn SubLikelihoodModel, theta: f64, n: usize, seed: u64) -> Result<ScoreCovariance> {
    let spec = model
        .builtin()
        .ok_or_else(|| Error::Unsupported("Monte Carlo covariance needs a model that can be sampled".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = spec.sample(theta, n, &mut rng)?;
    let batch = evaluate_scores(spec, &DVector::from_element(1, theta), &data, false)?;
    let emp = empirical_score_covariance(&batch)?;
    ScoreCovariance::new(emp.matrix, CovarianceSource::MonteCarlo { n, seed }, emp.theta)
}

/// Smallest penalty making the criterion bounded when `J` is singular.
///
/// Returns 0 when `J` is positive definite (smallest eigenvalue above `1e-10` times the
/// largest). Otherwise `eta = max dᵀv / |v|_1` over null directions `v`, which by LP duality
/// equals `min |d - u|_inf` over `u` in the range of `J`; a one-dimensional null space uses the
/// closed form and larger ones solve the dual linear program.
pub fn eta_threshold(j: &ScoreCovariance) -> f64 {
    eta_and_singularity(j).0
}

/// `eta` together with whether `J` is numerically singular.
pub fn eta_and_singularity(j: &ScoreCovariance) -> (f64, bool) {
    eta_with_linear_impl(j.matrix(), j.diagonal())
}

/// [`eta_threshold`] with an explicit linear term in place of `diag(J)`.
pub fn eta_threshold_with_linear(matrix: &DMatrix<f64>, linear: &DVector<f64>) -> f64 {
    eta_with_linear_impl(matrix, linear).0
}

fn eta_with_linear_impl(matrix: &DMatrix<f64>, linear: &DVector<f64>) -> (f64, bool) {
    let (values, vectors) = sym_eigen_desc(matrix);
    let tol = rank_threshold(&values);
    let rank = values.iter().filter(|&&v| v > tol).count();
    let m = values.len();
    if rank == m {
        return (0.0, false);
    }
    if rank + 1 == m {
        let v = vectors.column(m - 1);
        let l1: f64 = v.iter().map(|x| x.abs()).sum();
        return (linear.dot(&v).abs() / l1, true);
    }
    let range = vectors.columns(0, rank).into_owned();
    match range_distance_inf(&range, linear) {
        Some(eta) => (eta, true),
        None => {
            log::warn!("eta linear program failed; using the sup-norm of the linear term's null-space part");
            let resid = linear - &range * range.tr_mul(linear);
            (resid.amax().min(linear.amax()), true)
        }
    }
}

/// `min |d - U z|_inf` over `z`, as a linear program in `(z, t)`.
fn range_distance_inf(range: &DMatrix<f64>, linear: &DVector<f64>) -> Option<f64> {
    use microlp::{ComparisonOp, OptimizationDirection, Problem};
    let scale = linear.amax();
    if scale == 0.0 {
        return Some(0.0);
    }
    let d = linear / scale;
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let t = lp.add_var(1.0, (0.0, f64::INFINITY));
    let z: Vec<_> = (0..range.ncols()).map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    for i in 0..range.nrows() {
        let mut upper: Vec<_> = z.iter().enumerate().map(|(c, &v)| (v, range[(i, c)])).collect();
        upper.push((t, 1.0));
        lp.add_constraint(upper.as_slice(), ComparisonOp::Ge, d[i]);
        let mut lower: Vec<_> = z.iter().enumerate().map(|(c, &v)| (v, range[(i, c)])).collect();
        lower.push((t, -1.0));
        lp.add_constraint(lower.as_slice(), ComparisonOp::Le, d[i]);
    }
    let solution = lp.solve().ok()?.into_solution().ok()?;
    Some(solution.objective() * scale)
}

/// `tr(J_A) / tr(J)`: share of total score variance carried by `active`.
pub fn trace_ratio(j_full: &ScoreCovariance, active: &[usize]) -> Result<f64> {
    let total = j_full.trace();
    if !(total > 0.0) {
        return Err(Error::DegenerateCovariance("tr(J) = 0".into()));
    }
    if let Some(&bad) = active.iter().find(|&&i| i >= j_full.dim()) {
        return Err(Error::InvalidInput(format!("active index {bad} out of range")));
    }
    Ok(active.iter().map(|&i| j_full.diagonal()[i]).sum::<f64>() / total)
}
