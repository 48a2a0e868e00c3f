//! Central finite differences for checking analytic gradients.

use alloc::vec::Vec;

/// Default step for double-precision central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Below this magnitude, errors are
/// effectively measured in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    libm::fabs(a - b) / libm::fabs(a).max(libm::fabs(b)).max(RELATIVE_FLOOR)
}

/// Largest [`relative_error`] over paired entries; infinite on length
/// mismatch or non-finite input.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    if analytic.len() != numeric.len() {
        return f64::INFINITY;
    }
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| {
            if a.is_finite() && b.is_finite() {
                relative_error(a, b)
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}
