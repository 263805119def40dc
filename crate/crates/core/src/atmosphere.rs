//! Altitude-dependent radio signal velocity.
//!
//! The refractive index decays exponentially with altitude,
//! `n(h) = 1 + a0 * exp(-b * h)`, and a straight path between two altitudes
//! sees the path-averaged index
//!
//! ```text
//! n_eff(h1, h2) = 1 + a0 / (b * (h2 - h1)) * (exp(-b*h1) - exp(-b*h2))
//! ```
//!
//! so that the effective velocity is `c / n_eff` and the one-way delay over a
//! path of length `L` is `L * n_eff / c`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const MAX_PARAM: f64 = 1e-2;
/// Below this `b * |h2 - h1|` the divided difference switches to its Taylor series.
const SERIES_CUTOFF: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AtmosphereError {
    #[error("invalid atmosphere parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtmosphereModel {
    pub a0: f64,
    /// Decay constant in 1/m.
    pub b: f64,
}

impl Default for AtmosphereModel {
    /// Starting point for fitting: both parameters 1e-3.
    fn default() -> Self {
        AtmosphereModel { a0: 1e-3, b: 1e-3 }
    }
}

/// Partial derivatives of the mean index with respect to its inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanIndexGradient {
    pub d_h1: f64,
    pub d_h2: f64,
    pub d_a0: f64,
    pub d_b: f64,
}

impl AtmosphereModel {
    /// `a0 = 0` is accepted and denotes vacuum propagation.
    pub fn new(a0: f64, b: f64) -> Result<Self, AtmosphereError> {
        if !(a0.is_finite() && (0.0..=MAX_PARAM).contains(&a0)) {
            return Err(AtmosphereError::InvalidParameter(format!("a0 = {a0} outside [0, 1e-2]")));
        }
        if !(b.is_finite() && b > 0.0 && b <= MAX_PARAM) {
            return Err(AtmosphereError::InvalidParameter(format!("b = {b} outside (0, 1e-2]")));
        }
        Ok(AtmosphereModel { a0, b })
    }

    pub fn vacuum() -> Self {
        AtmosphereModel { a0: 0.0, b: 1e-3 }
    }

    pub fn refractive_index(&self, h: f64) -> f64 {
        1.0 + self.a0 * (-self.b * h).exp()
    }

    pub fn velocity(&self, h: f64) -> f64 {
        SPEED_OF_LIGHT / self.refractive_index(h)
    }

    /// Path-averaged refractive index between two altitudes.
    pub fn mean_index(&self, h1: f64, h2: f64) -> f64 {
        if self.a0 == 0.0 {
            return 1.0;
        }
        let (lo, hi) = if h2 >= h1 { (h1, h2) } else { (h2, h1) };
        let (phi, _) = phi_and_derivative(self.b * (hi - lo));
        1.0 + self.a0 * (-self.b * lo).exp() * phi
    }

    /// Mean index together with its partial derivatives.
    pub fn mean_index_with_gradient(&self, h1: f64, h2: f64) -> (f64, MeanIndexGradient) {
        let swapped = h2 < h1;
        let (lo, hi) = if swapped { (h2, h1) } else { (h1, h2) };
        let dh = hi - lo;
        let x = self.b * dh;
        let (phi, dphi) = phi_and_derivative(x);
        let e = (-self.b * lo).exp();
        let g = e * phi;
        let d_lo = -self.b * e * phi - e * dphi * self.b;
        let d_hi = e * dphi * self.b;
        let d_b = -lo * e * phi + e * dphi * dh;
        let (d_h1, d_h2) = if swapped {
            (self.a0 * d_hi, self.a0 * d_lo)
        } else {
            (self.a0 * d_lo, self.a0 * d_hi)
        };
        (
            1.0 + self.a0 * g,
            MeanIndexGradient {
                d_h1,
                d_h2,
                d_a0: g,
                d_b: self.a0 * d_b,
            },
        )
    }

    /// Average signal velocity along a straight path between two altitudes.
    pub fn effective_velocity(&self, h1: f64, h2: f64) -> f64 {
        SPEED_OF_LIGHT / self.mean_index(h1, h2)
    }

    /// Propagation time over `length` meters between altitudes `h1` and `h2`.
    pub fn propagation_time(&self, length: f64, h1: f64, h2: f64) -> f64 {
        length * self.mean_index(h1, h2) / SPEED_OF_LIGHT
    }
}

/// `phi(x) = (1 - exp(-x)) / x` and its derivative, for `x >= 0`.
fn phi_and_derivative(x: f64) -> (f64, f64) {
    if x.abs() < SERIES_CUTOFF {
        // Alternating series; five terms leave an error below 1e-18 at the cutoff.
        let x2 = x * x;
        let x3 = x2 * x;
        let x4 = x3 * x;
        let phi = 1.0 - x / 2.0 + x2 / 6.0 - x3 / 24.0 + x4 / 120.0;
        let dphi = -0.5 + x / 3.0 - x2 / 8.0 + x3 / 30.0 - x4 / 144.0;
        (phi, dphi)
    } else {
        let em = (-x).exp();
        let one_minus = -(-x).exp_m1();
        let phi = one_minus / x;
        let dphi = (x * em - one_minus) / (x * x);
        (phi, dphi)
    }
}
