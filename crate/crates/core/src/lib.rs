//! Sparse, efficient composite likelihoods.
//!
//! Sub-likelihood scores are weighted by minimizing the L1-penalized score distance
//! `1/2 w'Jw - w' diag(J) + lambda |w|_1`; the resulting rule drives a one-step Newton
//! estimate with sandwich standard errors.

pub mod error;
pub mod estimate;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod select;
pub mod sim;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use nalgebra;

pub use estimate::{EstimateReport, FitOptions, PreliminaryMode};
pub use model::{Dataset, ModelConfig, ModelSpec, ScoreBatch, Site, SubLikelihoodModel, UserModel};
pub use select::{Selection, SelectionRule};
pub use solver::{CompositionRule, SolutionPath};
pub use stats::ScoreCovariance;
