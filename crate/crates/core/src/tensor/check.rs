use super::{Result, Tensor, TensorError};

/// Compares an analytic gradient of `f` at `point` against central
/// differences with step `step`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check(
    f: impl Fn(&Tensor) -> f64,
    point: &Tensor,
    analytic: &Tensor,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(TensorError::Invalid(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if analytic.shape() != point.shape() {
        return super::shape_err(
            "grad_check",
            format!("gradient {:?} vs point {:?}", analytic.shape(), point.shape()),
        );
    }
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
