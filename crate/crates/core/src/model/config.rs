//! JSON model configuration.
//!
//! ```json
//! {"kind": "location-heterogeneous", "sigmas": [1.0, 2.0, 3.0]}
//! {"kind": "location-heterogeneous", "covariance": [[1.0, 0.2], [0.2, 2.0]]}
//! {"kind": "exchangeable-location", "dimension": 5, "rho": 0.5}
//! {"kind": "pairwise-exp-covariance", "distances": [[0, 1], [1, 0]]}
//! {"kind": "gravity-field", "sites": [{"id": "a", "lat": 45.1, "lon": 9.2, "population": 1.3}, ...]}
//! ```

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{ModelKind, ModelSpec, Site};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    LocationHeterogeneous {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigmas: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covariance: Option<Vec<Vec<f64>>>,
    },
    ExchangeableLocation {
        dimension: usize,
        rho: f64,
    },
    PairwiseExpCovariance {
        distances: Vec<Vec<f64>>,
    },
    GravityField {
        sites: Vec<Site>,
        /// Defaults to unit scales (data already normalized).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sigmas: Option<Vec<f64>>,
    },
}

fn to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let d = rows.len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidModel(format!("{what} must be square")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        match self {
            ModelConfig::LocationHeterogeneous { sigmas, covariance } => match (sigmas, covariance) {
                (Some(s), None) => ModelSpec::location_independent(s),
                (None, Some(c)) => ModelSpec::location(to_matrix(c, "covariance")?),
                _ => Err(Error::InvalidModel(
                    "location-heterogeneous needs exactly one of `sigmas` or `covariance`".into(),
                )),
            },
            ModelConfig::ExchangeableLocation { dimension, rho } => ModelSpec::exchangeable(*dimension, *rho),
            ModelConfig::PairwiseExpCovariance { distances } => ModelSpec::pairwise(to_matrix(distances, "distances")?),
            ModelConfig::GravityField { sites, sigmas } => {
                let sigmas = sigmas.clone().unwrap_or_else(|| vec![1.0; sites.len()]);
                ModelSpec::gravity(sites.clone(), sigmas)
            }
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

impl From<&ModelSpec> for ModelConfig {
    fn from(spec: &ModelSpec) -> Self {
        match spec.kind() {
            ModelKind::LocationHeterogeneous { covariance } => ModelConfig::LocationHeterogeneous {
                sigmas: None,
                covariance: Some(to_rows(covariance)),
            },
            ModelKind::ExchangeableLocation { dimension, rho } => ModelConfig::ExchangeableLocation {
                dimension: *dimension,
                rho: *rho,
            },
            ModelKind::PairwiseExpCovariance { distances } => ModelConfig::PairwiseExpCovariance {
                distances: to_rows(distances),
            },
            ModelKind::GravityField { sites, sigmas, .. } => ModelConfig::GravityField {
                sites: sites.clone(),
                sigmas: Some(sigmas.clone()),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_kind() {
        let cfgs = [
            r#"{"kind": "location-heterogeneous", "sigmas": [1, 2]}"#,
            r#"{"kind": "location-heterogeneous", "covariance": [[1, 0.1], [0.1, 2]]}"#,
            r#"{"kind": "exchangeable-location", "dimension": 4, "rho": 0.5}"#,
            r#"{"kind": "pairwise-exp-covariance", "distances": [[0, 1], [1, 0]]}"#,
            r#"{"kind": "gravity-field", "sites": [
                {"id": "a", "lat": 0, "lon": 0, "population": 1},
                {"id": "b", "lat": 1, "lon": 1, "population_millions": 2}]}"#,
        ];
        let ms: Vec<usize> = cfgs
            .iter()
            .map(|c| ModelConfig::from_json_str(c).unwrap().build().unwrap().m())
            .collect();
        assert_eq!(ms, vec![2, 2, 4, 1, 1]);
    }

    #[test]
    fn rejects_ambiguous_location() {
        let c = ModelConfig::from_json_str(r#"{"kind": "location-heterogeneous"}"#).unwrap();
        assert!(c.build().is_err());
        assert!(ModelConfig::from_json_str(r#"{"kind": "nope"}"#).is_err());
    }

    #[test]
    fn config_round_trip() {
        let spec = ModelSpec::exchangeable(3, 0.25).unwrap();
        let cfg = ModelConfig::from(&spec);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ModelConfig::from_json_str(&json).unwrap().build().unwrap(), spec);
    }
}
