//! Central finite-difference verification of analytic gradients.
//!
//! Inputs are perturbed as free variables: a perturbed embedding row is not
//! re-normalized, so the checked gradient is the one with respect to the raw
//! coordinates the loss receives.

use crate::error::{Error, Result};

use super::{BatchGrads, ContrastiveBatch};

const EPS_RANGE: (f64, f64) = (1e-7, 1e-3);

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&epsilon) {
        return Err(Error::Config(format!(
            "finite-difference epsilon {epsilon} outside [{}, {}]",
            EPS_RANGE.0, EPS_RANGE.1
        )));
    }
    Ok(())
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Largest `|analytic - numeric| / max(1, |numeric|)` over every coordinate
/// of every embedding tensor in `batch`.
pub fn grad_check<F>(loss_fn: F, batch: &ContrastiveBatch, epsilon: f64) -> Result<f64>
where
    F: Fn(&ContrastiveBatch) -> Result<(f64, BatchGrads)>,
{
    check_epsilon(epsilon)?;
    let (_, analytic) = loss_fn(batch)?;
    let mut probe = batch.clone();
    let mut worst: f64 = 0.0;
    for field in 0..5 {
        let len = batch.fields()[field].data().len();
        for k in 0..len {
            let original = batch.fields()[field].data()[k];
            let mut eval = |x: f64| -> Result<f64> {
                probe.fields_mut()[field].data_mut()[k] = x;
                let (v, _) = loss_fn(&probe)?;
                if !v.is_finite() {
                    return Err(Error::NumericalInstability(format!(
                        "loss is {v} with tensor {field} coordinate {k} perturbed"
                    )));
                }
                Ok(v)
            };
            let plus = eval(original + epsilon)?;
            let minus = eval(original - epsilon)?;
            eval(original)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(rel_error(analytic.fields()[field].data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Same check for an arbitrary scalar function of a flat parameter vector.
pub fn finite_difference_check<F>(
    mut f: F,
    x: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_epsilon(epsilon)?;
    if x.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} coordinates but {} gradient entries",
            x.len(),
            analytic.len()
        )));
    }
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        probe[k] = x[k] + epsilon;
        let plus = f(&probe)?;
        probe[k] = x[k] - epsilon;
        let minus = f(&probe)?;
        probe[k] = x[k];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NumericalInstability(format!(
                "non-finite value with coordinate {k} perturbed"
            )));
        }
        worst = worst.max(rel_error(analytic[k], (plus - minus) / (2.0 * epsilon)));
    }
    Ok(worst)
}
