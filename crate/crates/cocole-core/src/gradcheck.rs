//! Central finite-difference gradient oracle.
//!
//! Independent of the tape's backward rules on purpose: it only evaluates a
//! scalar function at perturbed points, so it can falsify them.

use crate::error::Result;

/// Central-difference gradient estimate, one coordinate at a time:
/// (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe)?;
        probe[i] = x[i] - h;
        let fm = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative error with the denominator floored at 1e-4, which makes the
/// comparison effectively absolute for near-zero gradients.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Worst-case relative error across two gradient buffers.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}
