//! Bivariate normal pair scores for exponential correlation models and the gravity covariance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lexicographic `(a, b)`, `a < b` pairs over `d` variates; position in the list is the
/// sub-likelihood index.
pub fn pair_list(d: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(d * d.saturating_sub(1) / 2);
    for a in 0..d {
        for b in a + 1..d {
            pairs.push((a, b));
        }
    }
    pairs
}

/// Index of pair `(a, b)` in [`pair_list`] order.
pub fn pair_index(d: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a < b { (a, b) } else { (b, a) };
    a * d - a * (a + 1) / 2 + (b - a - 1)
}

fn correlation(theta: f64, delta: f64) -> Result<f64> {
    let arg = theta * delta;
    if !(arg > 0.0) || !arg.is_finite() {
        return Err(Error::Domain {
            pair: None,
            message: format!("theta * delta = {arg} must be positive (correlation magnitude reaches 1)"),
        });
    }
    Ok((-arg).exp())
}

/// Score in `theta` of the standard bivariate normal log-density with correlation
/// `exp(-theta * delta)`.
pub fn pairwise_normal_score(theta: f64, x_j: f64, x_k: f64, delta: f64) -> Result<f64> {
    let rho = correlation(theta, delta)?;
    let s = 1.0 - rho * rho;
    let quad = x_j * x_j + x_k * x_k - 2.0 * x_j * x_k * rho;
    let u = (rho * quad / (s * s) - (rho + x_j * x_k) / s) * rho * delta;
    finite(u)
}

/// Derivative in `theta` of [`pairwise_normal_score`].
pub fn pairwise_normal_score_derivative(theta: f64, x_j: f64, x_k: f64, delta: f64) -> Result<f64> {
    let rho = correlation(theta, delta)?;
    let s = 1.0 - rho * rho;
    let xy = x_j * x_k;
    let quad = x_j * x_j + x_k * x_k - 2.0 * xy * rho;
    // U = delta * g(rho), g = rho^2 Q / s^2 - (rho^2 + rho xy) / s, d rho / d theta = -delta rho
    let dg_first = (2.0 * rho * quad - 2.0 * rho * rho * xy) / (s * s) + 4.0 * rho.powi(3) * quad / s.powi(3);
    let dg_second = (2.0 * rho + xy) / s + 2.0 * rho * (rho * rho + rho * xy) / (s * s);
    finite(-delta * delta * rho * (dg_first - dg_second))
}

/// Log-density of a standard bivariate normal with correlation `exp(-theta * delta)`.
pub fn pairwise_normal_log_density(theta: f64, x_j: f64, x_k: f64, delta: f64) -> Result<f64> {
    let rho = correlation(theta, delta)?;
    let s = 1.0 - rho * rho;
    let quad = x_j * x_j + x_k * x_k - 2.0 * x_j * x_k * rho;
    finite(-(2.0 * std::f64::consts::PI).ln() - 0.5 * s.ln() - quad / (2.0 * s))
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Domain {
            pair: None,
            message: "non-finite pairwise score".into(),
        })
    }
}

/// A spatial site: coordinates in degrees and population in millions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    #[serde(alias = "population_millions")]
    pub population: f64,
}

impl Site {
    pub fn new(id: impl Into<String>, lat: f64, lon: f64, population: f64) -> Self {
        Self {
            id: id.into(),
            lat,
            lon,
            population,
        }
    }

    /// Euclidean distance in the (lat, lon) plane.
    pub fn distance(&self, other: &Site) -> f64 {
        ((self.lat - other.lat).powi(2) + (self.lon - other.lon).powi(2)).sqrt()
    }
}

pub fn validate_sites(sites: &[Site]) -> Result<()> {
    for (j, s) in sites.iter().enumerate() {
        if !(s.population > 0.0) || !s.population.is_finite() {
            return Err(Error::InvalidModel(format!("site {j} ({}) has non-positive population", s.id)));
        }
        if !s.lat.is_finite() || !s.lon.is_finite() {
            return Err(Error::InvalidModel(format!("site {j} ({}) has non-finite coordinates", s.id)));
        }
    }
    Ok(())
}

/// Gravity distances `t_jk / (m_j m_k)`.
pub fn gravity_distances(sites: &[Site]) -> DMatrix<f64> {
    let d = sites.len();
    DMatrix::from_fn(d, d, |j, k| {
        if j == k {
            0.0
        } else {
            sites[j].distance(&sites[k]) / (sites[j].population * sites[k].population)
        }
    })
}

/// Gravity covariance `sigma_j sigma_k exp(-theta t_jk / (m_j m_k))`.
pub fn gravity_covariance(theta: f64, sites: &[Site], sigmas: &[f64]) -> Result<DMatrix<f64>> {
    validate_sites(sites)?;
    if sigmas.len() != sites.len() {
        return Err(Error::InvalidModel(format!(
            "{} sigmas for {} sites",
            sigmas.len(),
            sites.len()
        )));
    }
    if let Some(j) = sigmas.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::InvalidModel(format!("sigma_{j} must be positive")));
    }
    let delta = gravity_distances(sites);
    Ok(DMatrix::from_fn(sites.len(), sites.len(), |j, k| {
        sigmas[j] * sigmas[k] * (-theta * delta[(j, k)]).exp()
    }))
}
