use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::stats::ScoreCovariance;

const MAX_SWEEPS: usize = 200_000;

/// Cyclic coordinate descent with soft thresholding.
///
/// Coordinates with `J_jj = 0` are held at zero. Stops when a full sweep moves no weight by
/// more than `1e-12` relative to the largest weight.
pub fn coordinate_descent(j: &ScoreCovariance, lambda: f64, warm: Option<&DVector<f64>>) -> Result<DVector<f64>> {
    let m = j.dim();
    let jm = j.matrix();
    let d = j.diagonal();
    let mut w = match warm {
        Some(w0) if w0.len() == m => w0.clone(),
        Some(w0) => {
            return Err(Error::InvalidInput(format!("warm start has length {}, expected {m}", w0.len())));
        }
        None => DVector::zeros(m),
    };
    // Gradient of the smooth part: J w - diag(J).
    let mut grad = jm * &w - d;
    for _ in 0..MAX_SWEEPS {
        let mut max_step = 0.0_f64;
        for i in 0..m {
            let jii = jm[(i, i)];
            if jii <= 0.0 {
                continue;
            }
            let z = jii * w[i] - grad[i];
            let new = soft_threshold(z, lambda) / jii;
            let step = new - w[i];
            if step != 0.0 {
                grad.axpy(step, &jm.column(i), 1.0);
                w[i] = new;
                max_step = max_step.max(step.abs());
            }
        }
        let scale = w.amax().max(1.0);
        if max_step <= 1e-12 * scale {
            return Ok(w);
        }
        if !w.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("coordinate descent iterate".into()));
        }
    }
    log::warn!("coordinate descent stopped after {MAX_SWEEPS} sweeps");
    Ok(w)
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}
