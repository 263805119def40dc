//! Uniform B-splines of arbitrary (small) degree with penalized least-squares fitting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_DEGREE: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("time {t} outside spline span [{start}, {end}]")]
    OutOfSpan { t: f64, start: f64, end: f64 },
    #[error("invalid spline: {0}")]
    Invalid(String),
    #[error("spline fit is singular")]
    Singular,
}

/// Knot layout of a uniform B-spline: `intervals` spans of width `spacing` starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformKnots {
    pub degree: usize,
    pub start: f64,
    pub spacing: f64,
    pub intervals: usize,
}

impl UniformKnots {
    pub fn new(degree: usize, start: f64, spacing: f64, intervals: usize) -> Result<Self, SplineError> {
        if degree == 0 || degree > MAX_DEGREE {
            return Err(SplineError::Invalid(format!("degree {degree} not in 1..={MAX_DEGREE}")));
        }
        if !(spacing.is_finite() && spacing > 0.0) || intervals == 0 || !start.is_finite() {
            return Err(SplineError::Invalid("spacing and interval count must be positive".into()));
        }
        Ok(UniformKnots {
            degree,
            start,
            spacing,
            intervals,
        })
    }

    /// Knots covering `[lo, hi]` with spacing no larger than `max_spacing`
    /// and at least `min_knots` knots (interval boundaries).
    pub fn covering(degree: usize, lo: f64, hi: f64, max_spacing: f64, min_knots: usize) -> Result<Self, SplineError> {
        let span = (hi - lo).max(1e-9);
        let intervals = ((span / max_spacing).ceil() as usize).max(min_knots.saturating_sub(1)).max(1);
        UniformKnots::new(degree, lo, span / intervals as f64, intervals)
    }

    pub fn end(&self) -> f64 {
        self.start + self.spacing * self.intervals as f64
    }

    pub fn n_coeffs(&self) -> usize {
        self.intervals + self.degree
    }

    pub fn contains(&self, t: f64) -> bool {
        let tol = 1e-9 * self.spacing;
        t >= self.start - tol && t <= self.end() + tol
    }

    /// Nonzero basis values at `t`: returns the index of the first affected
    /// coefficient and `degree + 1` basis values.
    pub fn basis(&self, t: f64) -> Result<(usize, [f64; MAX_DEGREE + 1]), SplineError> {
        if !self.contains(t) {
            return Err(SplineError::OutOfSpan {
                t,
                start: self.start,
                end: self.end(),
            });
        }
        let x = ((t - self.start) / self.spacing).clamp(0.0, self.intervals as f64);
        let j = (x.floor() as usize).min(self.intervals - 1);
        let u = x - j as f64;
        Ok((j, uniform_basis(self.degree, u)))
    }
}

/// Cox-de Boor recursion on integer knots for the `degree + 1` functions
/// supported on the local interval, evaluated at fraction `u` in [0, 1].
fn uniform_basis(degree: usize, u: f64) -> [f64; MAX_DEGREE + 1] {
    let mut n = [0.0; MAX_DEGREE + 1];
    let mut left = [0.0; MAX_DEGREE + 1];
    let mut right = [0.0; MAX_DEGREE + 1];
    n[0] = 1.0;
    for d in 1..=degree {
        // knot t_{j+1-d'} relative to the interval start is (1 - d'), t_{j+d'} is d'.
        left[d] = u - (1.0 - d as f64);
        right[d] = d as f64 - u;
        let mut saved = 0.0;
        for r in 0..d {
            let temp = n[r] / (right[r + 1] + left[d - r]);
            n[r] = saved + right[r + 1] * temp;
            saved = left[d - r] * temp;
        }
        n[d] = saved;
    }
    n
}

/// B-spline curve on uniform knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniformSpline {
    pub knots: UniformKnots,
    pub coeffs: Vec<f64>,
}

impl UniformSpline {
    pub fn new(knots: UniformKnots, coeffs: Vec<f64>) -> Result<Self, SplineError> {
        if coeffs.len() != knots.n_coeffs() {
            return Err(SplineError::Invalid(format!(
                "{} coefficients for {} basis functions",
                coeffs.len(),
                knots.n_coeffs()
            )));
        }
        Ok(UniformSpline { knots, coeffs })
    }

    pub fn zero(knots: UniformKnots) -> Self {
        let n = knots.n_coeffs();
        UniformSpline {
            knots,
            coeffs: vec![0.0; n],
        }
    }

    pub fn eval(&self, t: f64) -> Result<f64, SplineError> {
        let (first, b) = self.knots.basis(t)?;
        Ok((0..=self.knots.degree).map(|k| b[k] * self.coeffs[first + k]).sum())
    }

    /// Weighted least squares with an optional difference penalty of order
    /// `penalty_order` on the coefficients (P-spline).
    pub fn fit(
        knots: UniformKnots,
        ts: &[f64],
        ys: &[f64],
        weights: Option<&[f64]>,
        penalty_order: usize,
        lambda: f64,
    ) -> Result<Self, SplineError> {
        if ts.len() != ys.len() || weights.is_some_and(|w| w.len() != ts.len()) {
            return Err(SplineError::Invalid("mismatched input lengths".into()));
        }
        let p = knots.n_coeffs();
        let mut ata = DMatrix::<f64>::zeros(p, p);
        let mut aty = DVector::<f64>::zeros(p);
        for (i, (&t, &y)) in ts.iter().zip(ys).enumerate() {
            let w = weights.map_or(1.0, |w| w[i]);
            let (first, b) = knots.basis(t)?;
            for r in 0..=knots.degree {
                aty[first + r] += w * b[r] * y;
                for c in 0..=knots.degree {
                    ata[(first + r, first + c)] += w * b[r] * b[c];
                }
            }
        }
        if lambda > 0.0 {
            add_difference_penalty(&mut ata, 0, p, penalty_order, lambda);
        }
        let coeffs = solve_spd(ata, aty).ok_or(SplineError::Singular)?;
        Ok(UniformSpline {
            knots,
            coeffs: coeffs.iter().copied().collect(),
        })
    }
}

/// Adds `lambda * D'D` for the `order`-th difference operator acting on
/// coefficients `offset..offset + len` of the normal matrix.
pub fn add_difference_penalty(ata: &mut DMatrix<f64>, offset: usize, len: usize, order: usize, lambda: f64) {
    if order == 0 {
        for i in 0..len {
            ata[(offset + i, offset + i)] += lambda;
        }
        return;
    }
    if len <= order {
        return;
    }
    // Binomial stencil with alternating signs.
    let mut stencil = vec![1.0f64];
    for _ in 0..order {
        let mut next = vec![0.0; stencil.len() + 1];
        for (i, s) in stencil.iter().enumerate() {
            next[i] -= s;
            next[i + 1] += s;
        }
        stencil = next;
    }
    for row in 0..(len - order) {
        for (a, sa) in stencil.iter().enumerate() {
            for (b, sb) in stencil.iter().enumerate() {
                ata[(offset + row + a, offset + row + b)] += lambda * sa * sb;
            }
        }
    }
}

/// Cholesky solve with a fallback to LU when the matrix is not numerically SPD.
pub fn solve_spd(a: DMatrix<f64>, b: DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(&b);
        if x.iter().all(|v| v.is_finite()) {
            return Some(x);
        }
    }
    a.lu().solve(&b).filter(|x| x.iter().all(|v| v.is_finite()))
}
