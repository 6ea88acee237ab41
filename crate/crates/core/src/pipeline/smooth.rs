use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// Standard normal upper quartile; scales a bandwidth so the kernel quartiles sit at
/// `+-0.25 * bandwidth`.
const NORMAL_QUARTILE: f64 = 0.674_489_750_196_081_7;

/// `n^{-1/5} * range * 0.5` with the time index scaled to `[0, 1]`.
pub fn default_bandwidth(n: usize) -> f64 {
    (n as f64).powf(-0.2) * 0.5
}

/// Equally spaced time points on `[0, 1]`.
pub fn time_index(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Gaussian kernel weights `K[(i, l)]` of observation `l` at evaluation point `i`.
pub fn kernel_weights(times: &[f64], bandwidth: f64) -> DMatrix<f64> {
    let sd = 0.25 * bandwidth / NORMAL_QUARTILE;
    let n = times.len();
    DMatrix::from_fn(n, n, |i, l| {
        let u = (times[i] - times[l]) / sd;
        (-0.5 * u * u).exp()
    })
}

/// Nadaraya-Watson fit at every time point.
pub fn nadaraya_watson(times: &[f64], values: &[f64], bandwidth: f64) -> Vec<f64> {
    let k = kernel_weights(times, bandwidth);
    (0..times.len())
        .map(|i| {
            let row = k.row(i);
            let num: f64 = row.iter().zip(values).map(|(w, v)| w * v).sum();
            num / row.sum()
        })
        .collect()
}

/// Residuals scaled to unit mean square, with the fitted trends and residual variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detrended {
    pub residuals: Vec<Vec<f64>>,
    /// `n x d`, column `j` is the smoothed trend of variate `j`.
    pub trends: Vec<Vec<f64>>,
    /// `sigma_j^2 = n^{-1} sum_i (X_ij - mu_ij)^2`.
    pub variances: Vec<f64>,
    pub bandwidth: f64,
}

impl Detrended {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_rows(&self.residuals)
    }
}

/// Removes a kernel-smoothed trend from each column and divides by the residual scale.
pub fn detrend_normalize(data: &Dataset, bandwidth: Option<f64>) -> Result<Detrended> {
    let n = data.n();
    if n < 3 {
        return Err(Error::InvalidInput(format!("detrending needs at least 3 observations, got {n}")));
    }
    let bandwidth = bandwidth.unwrap_or_else(|| default_bandwidth(n));
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth {bandwidth} must be positive")));
    }
    let times = time_index(n);
    let k = kernel_weights(&times, bandwidth);
    let row_sums: Vec<f64> = (0..n).map(|i| k.row(i).sum()).collect();
    let x = data.matrix();
    let d = data.d();
    let mut residuals = vec![vec![0.0; d]; n];
    let mut trends = vec![vec![0.0; d]; n];
    let mut variances = vec![0.0; d];
    for j in 0..d {
        let col = x.column(j);
        let mu: Vec<f64> = (0..n).map(|i| k.row(i).transpose().dot(&col) / row_sums[i]).collect();
        let eps: Vec<f64> = (0..n).map(|i| col[i] - mu[i]).collect();
        let var = eps.iter().map(|e| e * e).sum::<f64>() / n as f64;
        let scale = col.amax().max(f64::MIN_POSITIVE);
        if !(var.sqrt() > 1e-12 * scale) {
            return Err(Error::DegenerateColumn { column: j });
        }
        let sd = var.sqrt();
        for i in 0..n {
            residuals[i][j] = eps[i] / sd;
            trends[i][j] = mu[i];
        }
        variances[j] = var;
    }
    Ok(Detrended {
        residuals,
        trends,
        variances,
        bandwidth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn constant_column_is_degenerate() {
        let data = Dataset::from_rows(&[vec![1.0, 2.0], vec![2.0, 2.0], vec![0.5, 2.0], vec![3.0, 2.0]]).unwrap();
        match detrend_normalize(&data, None) {
            Err(Error::DegenerateColumn { column }) => assert_eq!(column, 1),
            other => panic!("expected degenerate column, got {other:?}"),
        }
    }

    #[test]
    fn huge_bandwidth_gives_column_mean() {
        let rows = vec![vec![1.0], vec![4.0], vec![2.0], vec![5.0]];
        let data = Dataset::from_rows(&rows).unwrap();
        let out = detrend_normalize(&data, Some(1e12)).unwrap();
        for t in &out.trends {
            assert_relative_eq!(t[0], 3.0, max_relative = 1e-12);
        }
        assert_relative_eq!(out.variances[0], 2.5, max_relative = 1e-12);
    }

    #[test]
    fn normalized_mean_square_is_one() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64 * 0.3 + ((i * 7919) % 13) as f64 / 13.0]).collect();
        let out = detrend_normalize(&Dataset::from_rows(&rows).unwrap(), None).unwrap();
        let ms = out.residuals.iter().map(|r| r[0] * r[0]).sum::<f64>() / 40.0;
        assert!((ms - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_quartiles() {
        // Weight ratio at a quarter bandwidth equals the normal density ratio at its quartile.
        let k = kernel_weights(&[0.0, 0.25], 1.0);
        assert_relative_eq!(k[(0, 1)], (-0.5 * NORMAL_QUARTILE * NORMAL_QUARTILE).exp(), max_relative = 1e-12);
    }
}
