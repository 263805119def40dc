//! Smoothed absolute value used by every 1-norm objective.

/// Default transition width: 1 ns (in seconds).
pub const DEFAULT_EPSILON_S: f64 = 1e-9;

/// Pseudo-Huber loss `sqrt(r^2 + eps^2) - eps`: quadratic inside `|r| < eps`,
/// linear with unit slope outside.
#[inline]
pub fn smooth_abs(r: f64, eps: f64) -> f64 {
    r.hypot(eps) - eps
}

/// Derivative of [`smooth_abs`].
#[inline]
pub fn smooth_abs_deriv(r: f64, eps: f64) -> f64 {
    r / r.hypot(eps)
}

/// IRLS weight `psi(r) / r` of [`smooth_abs`].
#[inline]
pub fn smooth_abs_weight(r: f64, eps: f64) -> f64 {
    1.0 / r.hypot(eps)
}

/// Median of a slice (averaging the two middle values). `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}
