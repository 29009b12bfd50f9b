//! Central finite-difference checker for analytic gradients.

use crate::error::{Error, Result};

/// Compares the analytic gradient returned by `f` at `point` against central
/// differences with step `eps`, returning the largest
/// `|analytic − numeric| / max(1, |analytic|)` over coordinates.
///
/// `f` maps a flat parameter vector to `(value, gradient)`.
pub fn grad_check<F>(f: F, point: &[f32], eps: f32) -> Result<f32>
where
    F: Fn(&[f32]) -> Result<(f32, Vec<f32>)>,
{
    grad_check_coords(f, point, eps, 0..point.len())
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_coords<F, I>(f: F, point: &[f32], eps: f32, coords: I) -> Result<f32>
where
    F: Fn(&[f32]) -> Result<(f32, Vec<f32>)>,
    I: IntoIterator<Item = usize>,
{
    let (v0, analytic) = f(point)?;
    if !v0.is_finite() {
        return Err(Error::NonFinite(format!("loss {v0} at the base point")));
    }
    if analytic.len() != point.len() {
        return Err(Error::shape("grad_check", &[point.len()], &[analytic.len()]));
    }
    let mut x = point.to_vec();
    let mut worst = 0.0f32;
    for i in coords {
        let orig = x[i];
        x[i] = orig + eps;
        let (plus, _) = f(&x)?;
        x[i] = orig - eps;
        let (minus, _) = f(&x)?;
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed coordinate {i}")));
        }
        let numeric = (plus as f64 - minus as f64) / (2.0 * eps as f64);
        let a = analytic[i] as f64;
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err as f32);
    }
    Ok(worst)
}
