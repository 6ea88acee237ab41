use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::pairwise::{
    gravity_covariance, gravity_distances, pair_list, pairwise_normal_log_density, pairwise_normal_score,
    pairwise_normal_score_derivative, validate_sites, Site,
};
use super::{Dataset, SubLikelihoodModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKindTag {
    LocationHeterogeneous,
    ExchangeableLocation,
    PairwiseExpCovariance,
    GravityField,
    UserDefined,
}

/// Parameters of the built-in Gaussian models. All have a scalar parameter `theta`.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    /// `X ~ N(theta 1, Sigma)`, marginal scores `(x_j - theta) / sigma_j^2`.
    LocationHeterogeneous { covariance: DMatrix<f64> },
    /// `X ~ N(theta 1, (1 - rho) I + rho 1 1')`, scores `x_j - theta`.
    ExchangeableLocation { dimension: usize, rho: f64 },
    /// `X ~ N(0, R(theta))`, `R_jk = exp(-theta delta_jk)`, one score per variable pair.
    PairwiseExpCovariance { distances: DMatrix<f64> },
    /// Gravity-model Gaussian field; scores are pairwise on `x_j / sigma_j`.
    GravityField {
        sites: Vec<Site>,
        sigmas: Vec<f64>,
        distances: DMatrix<f64>,
    },
}

/// A validated built-in model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    kind: ModelKind,
    pairs: Vec<(usize, usize)>,
}

impl ModelSpec {
    pub fn location(covariance: DMatrix<f64>) -> Result<Self> {
        let d = covariance.nrows();
        if d == 0 || covariance.ncols() != d {
            return Err(Error::InvalidModel("covariance must be a non-empty square matrix".into()));
        }
        if let Some(j) = (0..d).find(|&j| !(covariance[(j, j)] > 0.0)) {
            return Err(Error::InvalidModel(format!("sigma_{j}^2 must be positive")));
        }
        check_symmetric(&covariance, "covariance")?;
        Ok(Self {
            kind: ModelKind::LocationHeterogeneous { covariance },
            pairs: Vec::new(),
        })
    }

    /// Independent heterogeneous location model with marginal standard deviations `sigmas`.
    pub fn location_independent(sigmas: &[f64]) -> Result<Self> {
        if sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidModel("sigmas must be positive".into()));
        }
        let var = DVector::from_iterator(sigmas.len(), sigmas.iter().map(|s| s * s));
        Self::location(DMatrix::from_diagonal(&var))
    }

    pub fn exchangeable(dimension: usize, rho: f64) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::InvalidModel(format!("rho = {rho} must lie in (0, 1)")));
        }
        Ok(Self {
            kind: ModelKind::ExchangeableLocation { dimension, rho },
            pairs: Vec::new(),
        })
    }

    pub fn pairwise(distances: DMatrix<f64>) -> Result<Self> {
        let d = distances.nrows();
        if d < 2 || distances.ncols() != d {
            return Err(Error::InvalidModel("distance matrix must be square with d >= 2".into()));
        }
        if distances.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::InvalidModel("distances must be finite and non-negative".into()));
        }
        check_symmetric(&distances, "distance matrix")?;
        Ok(Self {
            kind: ModelKind::PairwiseExpCovariance { distances },
            pairs: pair_list(d),
        })
    }

    pub fn gravity(sites: Vec<Site>, sigmas: Vec<f64>) -> Result<Self> {
        validate_sites(&sites)?;
        if sites.len() < 2 {
            return Err(Error::InvalidModel("gravity model needs at least two sites".into()));
        }
        if sigmas.len() != sites.len() || sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidModel("one positive sigma per site is required".into()));
        }
        let distances = gravity_distances(&sites);
        let d = sites.len();
        Ok(Self {
            kind: ModelKind::GravityField {
                sites,
                sigmas,
                distances,
            },
            pairs: pair_list(d),
        })
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn tag(&self) -> ModelKindTag {
        match self.kind {
            ModelKind::LocationHeterogeneous { .. } => ModelKindTag::LocationHeterogeneous,
            ModelKind::ExchangeableLocation { .. } => ModelKindTag::ExchangeableLocation,
            ModelKind::PairwiseExpCovariance { .. } => ModelKindTag::PairwiseExpCovariance,
            ModelKind::GravityField { .. } => ModelKindTag::GravityField,
        }
    }

    pub fn is_pairwise(&self) -> bool {
        !self.pairs.is_empty()
    }

    /// Variable pair of each sub-likelihood (pairwise kinds only; empty otherwise).
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn d(&self) -> usize {
        match &self.kind {
            ModelKind::LocationHeterogeneous { covariance } => covariance.nrows(),
            ModelKind::ExchangeableLocation { dimension, .. } => *dimension,
            ModelKind::PairwiseExpCovariance { distances } => distances.nrows(),
            ModelKind::GravityField { sites, .. } => sites.len(),
        }
    }

    pub fn m(&self) -> usize {
        if self.is_pairwise() {
            self.pairs.len()
        } else {
            self.d()
        }
    }

    /// Pair distances `delta_jk` entering `exp(-theta delta_jk)`.
    pub fn pair_distances(&self) -> Option<&DMatrix<f64>> {
        match &self.kind {
            ModelKind::PairwiseExpCovariance { distances } | ModelKind::GravityField { distances, .. } => Some(distances),
            _ => None,
        }
    }

    /// Variances `sigma_j^2` used to scale the location scores.
    pub fn score_variances(&self) -> Option<Vec<f64>> {
        match &self.kind {
            ModelKind::LocationHeterogeneous { covariance } => Some(covariance.diagonal().iter().copied().collect()),
            ModelKind::ExchangeableLocation { dimension, .. } => Some(vec![1.0; *dimension]),
            _ => None,
        }
    }

    fn standardization(&self) -> Option<&[f64]> {
        match &self.kind {
            ModelKind::GravityField { sigmas, .. } => Some(sigmas),
            _ => None,
        }
    }

    /// Mean vector of `X` under parameter `theta`.
    pub fn mean(&self, theta: f64) -> DVector<f64> {
        match &self.kind {
            ModelKind::LocationHeterogeneous { .. } | ModelKind::ExchangeableLocation { .. } => {
                DVector::from_element(self.d(), theta)
            }
            _ => DVector::zeros(self.d()),
        }
    }

    /// Covariance of `X` under parameter `theta`.
    pub fn covariance(&self, theta: f64) -> Result<DMatrix<f64>> {
        match &self.kind {
            ModelKind::LocationHeterogeneous { covariance } => Ok(covariance.clone()),
            ModelKind::ExchangeableLocation { dimension, rho } => {
                let d = *dimension;
                Ok(DMatrix::from_fn(d, d, |j, k| if j == k { 1.0 } else { *rho }))
            }
            ModelKind::PairwiseExpCovariance { distances } => Ok(DMatrix::from_fn(self.d(), self.d(), |j, k| {
                if j == k {
                    1.0
                } else {
                    (-theta * distances[(j, k)]).exp()
                }
            })),
            ModelKind::GravityField { sites, sigmas, .. } => gravity_covariance(theta, sites, sigmas),
        }
    }

    /// Fisher information for `theta` in the full Gaussian model.
    ///
    /// Location kinds: `1' Sigma^{-1} 1`. Covariance kinds: `tr[(R^{-1} dR)^2] / 2`.
    pub fn fisher_information(&self, theta: f64) -> Result<f64> {
        let cov = self.covariance(theta)?;
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::DegenerateCovariance("model covariance is not positive definite".into()))?;
        match &self.kind {
            ModelKind::LocationHeterogeneous { .. } | ModelKind::ExchangeableLocation { .. } => {
                let ones = DVector::from_element(self.d(), 1.0);
                Ok(ones.dot(&chol.solve(&ones)))
            }
            _ => {
                let delta = self.pair_distances().expect("pairwise kind");
                let dcov = DMatrix::from_fn(self.d(), self.d(), |j, k| -delta[(j, k)] * cov[(j, k)]);
                let a = chol.solve(&dcov);
                Ok(0.5 * (&a * &a).trace())
            }
        }
    }

    /// Draws `n` observations at parameter `theta`.
    pub fn sample<R: Rng + ?Sized>(&self, theta: f64, n: usize, rng: &mut R) -> Result<Dataset> {
        let cov = self.covariance(theta)?;
        let l = cov
            .cholesky()
            .ok_or_else(|| Error::DegenerateCovariance("model covariance is not positive definite".into()))?
            .unpack();
        let mean = self.mean(theta);
        let d = self.d();
        let mut out = DMatrix::zeros(n, d);
        let mut z = DVector::zeros(d);
        for i in 0..n {
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let x = &mean + &l * &z;
            out.row_mut(i).copy_from(&x.transpose());
        }
        Dataset::new(out)
    }

    /// Log-density of sub-likelihood `j` at one observation.
    pub fn sub_log_density(&self, j: usize, theta: f64, x: &[f64]) -> Result<f64> {
        if let Some(var) = self.score_variances() {
            let r = x[j] - theta;
            return Ok(-0.5 * (2.0 * std::f64::consts::PI * var[j]).ln() - r * r / (2.0 * var[j]));
        }
        let (a, b) = self.pairs[j];
        let delta = self.pair_distances().expect("pairwise kind")[(a, b)];
        match self.standardization() {
            Some(sig) => Ok(pairwise_normal_log_density(theta, x[a] / sig[a], x[b] / sig[b], delta)?
                - (sig[a] * sig[b]).ln()),
            None => pairwise_normal_log_density(theta, x[a], x[b], delta),
        }
    }

    fn pair_values(&self, x: &[f64], a: usize, b: usize) -> (f64, f64) {
        match self.standardization() {
            Some(sig) => (x[a] / sig[a], x[b] / sig[b]),
            None => (x[a], x[b]),
        }
    }

    fn pairwise_eval(
        &self,
        theta: f64,
        x: &[f64],
        f: fn(f64, f64, f64, f64) -> Result<f64>,
    ) -> Result<Vec<f64>> {
        let delta = self.pair_distances().expect("pairwise kind");
        self.pairs
            .iter()
            .map(|&(a, b)| {
                let (xa, xb) = self.pair_values(x, a, b);
                f(theta, xa, xb, delta[(a, b)]).map_err(|e| match e {
                    Error::Domain { message, .. } => Error::Domain {
                        pair: Some((a, b)),
                        message,
                    },
                    other => other,
                })
            })
            .collect()
    }
}

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let scale = m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())).max(1.0);
    for j in 0..m.nrows() {
        for k in 0..j {
            if (m[(j, k)] - m[(k, j)]).abs() > 1e-12 * scale {
                return Err(Error::InvalidModel(format!("{what} is not symmetric at ({j}, {k})")));
            }
        }
    }
    Ok(())
}

fn scalar_theta(theta: &DVector<f64>) -> Result<f64> {
    if theta.len() != 1 {
        return Err(Error::InvalidInput(format!("built-in models have a scalar parameter, got length {}", theta.len())));
    }
    Ok(theta[0])
}

impl SubLikelihoodModel for ModelSpec {
    fn parameter_dimension(&self) -> usize {
        1
    }

    fn sublikelihood_count(&self) -> usize {
        self.m()
    }

    fn variate_dimension(&self) -> usize {
        self.d()
    }

    fn theta_domain(&self) -> (f64, f64) {
        if self.is_pairwise() {
            (0.0, f64::INFINITY)
        } else {
            (f64::NEG_INFINITY, f64::INFINITY)
        }
    }

    fn scores(&self, theta: &DVector<f64>, x: &[f64]) -> Result<DMatrix<f64>> {
        let t = scalar_theta(theta)?;
        let values = match self.score_variances() {
            Some(var) => x.iter().zip(&var).map(|(xj, v)| (xj - t) / v).collect(),
            None => self.pairwise_eval(t, x, pairwise_normal_score)?,
        };
        Ok(DMatrix::from_row_slice(1, values.len(), &values))
    }

    fn score_gradients(&self, theta: &DVector<f64>, x: &[f64]) -> Option<Result<Vec<DMatrix<f64>>>> {
        let t = match scalar_theta(theta) {
            Ok(t) => t,
            Err(e) => return Some(Err(e)),
        };
        let values = match self.score_variances() {
            Some(var) => Ok(var.iter().map(|v| -1.0 / v).collect::<Vec<_>>()),
            None => self.pairwise_eval(t, x, pairwise_normal_score_derivative),
        };
        Some(values.map(|v| v.into_iter().map(|g| DMatrix::from_element(1, 1, g)).collect()))
    }

    fn builtin(&self) -> Option<&ModelSpec> {
        Some(self)
    }
}
