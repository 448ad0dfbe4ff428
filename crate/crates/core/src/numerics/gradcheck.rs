use crate::error::{Error, Result};

use super::tensor::{ParamTensor, Tensor};

/// Elementwise acceptance band for analytic-vs-numeric gradients: an entry
/// passes when its absolute error is within `abs` or its relative error is
/// within `rel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            abs: 1e-3,
            rel: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst |analytic − numeric| / max(|analytic|, |numeric|) over checked entries.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Worst error divided by its allowed band; the check passes when ≤ 1.
    pub worst_ratio: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

/// Central-difference check of `param.grad` against `f`, evaluated at
/// perturbed copies of `param.value`.
pub fn finite_difference_check<F>(
    param: &ParamTensor,
    epsilon: f64,
    tolerance: Tolerance,
    f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    check_gradient(&param.value, &param.grad, epsilon, tolerance, f)
}

/// Same as [`finite_difference_check`] with explicit value and analytic
/// gradient tensors.
pub fn check_gradient<F>(
    value: &Tensor,
    analytic: &Tensor,
    epsilon: f64,
    tolerance: Tolerance,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if epsilon <= 0.0 {
        return Err(Error::Domain(format!("epsilon must be positive, got {epsilon}")));
    }
    if value.shape() != analytic.shape() {
        return Err(Error::Dimension(format!(
            "value {:?} vs gradient {:?}",
            value.shape(),
            analytic.shape()
        )));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_ratio: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut probe = value.clone();
    for i in 0..value.len() {
        let base = value.data()[i];
        let plus = base + epsilon as f32;
        let minus = base - epsilon as f32;
        probe.data_mut()[i] = plus;
        let f_plus = f(&probe)?;
        probe.data_mut()[i] = minus;
        let f_minus = f(&probe)?;
        probe.data_mut()[i] = base;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective is not finite when perturbing entry {i}"
            )));
        }
        // Divide by the perturbation actually representable in f32.
        let numeric = (f_plus - f_minus) / (plus as f64 - minus as f64);
        let exact = analytic.data()[i] as f64;
        let abs_err = (exact - numeric).abs();
        let scale = exact.abs().max(numeric.abs());
        let rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
        let band = tolerance.abs.max(tolerance.rel * scale);
        let ratio = abs_err / band;
        report.max_abs_error = report.max_abs_error.max(abs_err);
        report.max_rel_error = report.max_rel_error.max(rel_err);
        if ratio > report.worst_ratio {
            report.worst_ratio = ratio;
            report.worst_index = i;
            report.analytic_at_worst = exact;
            report.numeric_at_worst = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
