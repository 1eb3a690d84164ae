//! Central finite-difference gradient verification.

use crate::error::{config_err, Result};
use crate::nn::ParameterSet;

/// Gradients smaller than this are compared in absolute rather than relative
/// terms; central differences cannot resolve them against rounding noise.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient returned by `f` with central differences
/// `(f(p + h) − f(p − h)) / 2h` coordinate by coordinate.
///
/// Returns the worst relative error, with denominator
/// `max(|analytic|, |numeric|, GRADIENT_FLOOR)`.
pub fn finite_difference_check<F>(f: F, params: &ParameterSet, h: f64) -> Result<f64>
where
    F: Fn(&ParameterSet) -> Result<(f64, ParameterSet)>,
{
    Ok(finite_difference_report(f, params, h)?.max_rel_error)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub fn finite_difference_report<F>(f: F, params: &ParameterSet, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet) -> Result<(f64, ParameterSet)>,
{
    if !(h > 0.0) {
        return config_err(format!("finite-difference step must be positive, got {h}"));
    }
    let (_, grad) = f(params)?;
    let analytic = grad.flatten();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: analytic.len(),
    };
    let mut probe = params.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = params.get_flat(i);
        probe.set_flat(i, orig + h);
        let (plus, _) = f(&probe)?;
        probe.set_flat(i, orig - h);
        let (minus, _) = f(&probe)?;
        probe.set_flat(i, orig);
        let numeric = (plus - minus) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
        let err = (a - numeric).abs() / denom;
        if err > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: a,
                numeric,
                ..report
            };
        }
    }
    Ok(report)
}
