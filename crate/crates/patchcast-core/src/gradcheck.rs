//! Finite-difference gradient oracle.
//!
//! Works on a flat parameter vector; model code provides flatten/unflatten.

use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
}

/// Compare analytic gradients against central finite differences.
///
/// `loss_fn` must be deterministic (dropout and data masks frozen); the check
/// evaluates it twice at the starting point and errors out if the values
/// differ. Returns the maximum relative error across all coordinates, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    loss_fn: F,
    theta: &mut [f64],
    analytic_grad: &[f64],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    finite_difference_report(loss_fn, theta, analytic_grad, eps).map(|r| r.max_rel_err)
}

/// As [`finite_difference_check`] but also reports the worst coordinate.
pub fn finite_difference_report<F>(
    loss_fn: F,
    theta: &mut [f64],
    analytic_grad: &[f64],
    eps: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::InvalidArg(format!(
            "finite-difference eps must be in [1e-5, 1e-2], got {eps}"
        )));
    }
    if theta.len() != analytic_grad.len() {
        return Err(Error::shape(
            "finite_difference_check",
            theta.len(),
            analytic_grad.len(),
        ));
    }
    let f0 = loss_fn(theta)?;
    let f0b = loss_fn(theta)?;
    if f0 != f0b {
        return Err(Error::InvalidArg(format!(
            "loss_fn is not deterministic: {f0} vs {f0b}"
        )));
    }

    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + eps;
        let fp = loss_fn(theta)?;
        theta[i] = orig - eps;
        let fm = loss_fn(theta)?;
        theta[i] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic_grad[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_index: worst,
    })
}
