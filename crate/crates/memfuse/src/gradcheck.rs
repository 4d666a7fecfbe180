//! Central finite-difference gradient checking.
//!
//! Validates analytic gradients by perturbing each parameter of a scalar
//! function ±step and comparing `(f(x+h) − f(x−h)) / 2h` against the
//! reported derivative. The callable is re-invoked from scratch for each
//! probe, so anything stochastic inside must be re-seeded per call.

/// Step used throughout the gradient-check suites.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central difference of `f` w.r.t. every entry of `params`.
pub fn central_difference<F>(f: &mut F, params: &mut [f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let saved = params[i];
        params[i] = saved + step;
        let plus = f(params);
        params[i] = saved - step;
        let minus = f(params);
        params[i] = saved;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// `max_i |analytic_i − numeric_i| / (|analytic_i| + 1e-8)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + 1e-8))
        .fold(0.0, f64::max)
}
