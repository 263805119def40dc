//! Dense BFGS with a strong-Wolfe line search.
//!
//! Used for the smoothed 1-norm problems (per-record position solve and the
//! joint core-network fit), where the objective is cheap relative to the
//! O(n^2) inverse-Hessian update for the sizes involved (n < ~300).

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop when the infinity norm of the gradient drops below this.
    pub gradient_tolerance: f64,
    /// Stop when the Euclidean norm of an accepted step drops below this.
    pub step_tolerance: f64,
    /// Stop when the relative objective decrease over `stall_window` iterations is below this.
    pub relative_tolerance: f64,
    pub stall_window: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iterations: 200,
            gradient_tolerance: 1e-10,
            step_tolerance: 1e-8,
            relative_tolerance: 1e-12,
            stall_window: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfgsStatus {
    GradientConverged,
    StepConverged,
    Stalled,
    MaxIterations,
    /// The line search could not find a decrease even from a steepest-descent restart.
    LineSearchFailed,
}

impl BfgsStatus {
    pub fn converged(self) -> bool {
        matches!(
            self,
            BfgsStatus::GradientConverged | BfgsStatus::StepConverged | BfgsStatus::Stalled
        )
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub iterations: usize,
    pub status: BfgsStatus,
    pub last_step: f64,
}

/// Minimizes `f`, which writes the gradient into its second argument and
/// returns the objective value.
pub fn minimize<F>(mut f: F, x0: DVector<f64>, opts: &BfgsOptions) -> BfgsResult
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = DVector::zeros(n);
    let mut fx = f(&x, &mut g);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut history: Vec<f64> = vec![fx];
    let mut last_step = f64::INFINITY;

    if !fx.is_finite() {
        return BfgsResult {
            x,
            value: fx,
            gradient: g,
            iterations: 0,
            status: BfgsStatus::LineSearchFailed,
            last_step,
        };
    }

    for iter in 0..opts.max_iterations {
        if g.amax() < opts.gradient_tolerance {
            return done(x, fx, g, iter, BfgsStatus::GradientConverged, last_step);
        }
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            scaled = false;
            d = -g.clone();
            slope = g.dot(&d);
        }
        // unscaled steepest-descent steps start by moving no coordinate more than one unit
        let alpha0 = if scaled { 1.0 } else { (1.0 / g.amax()).min(1.0) };
        let mut ls = line_search(&mut f, &x, fx, &d, slope, alpha0);
        if ls.is_none() && scaled {
            // Curvature information went stale; retry along steepest descent.
            h = DMatrix::identity(n, n);
            scaled = false;
            d = -g.clone();
            slope = g.dot(&d);
            ls = line_search(&mut f, &x, fx, &d, slope, (1.0 / g.amax()).min(1.0));
        }
        let Some((alpha, f_new, g_new)) = ls else {
            return done(x, fx, g, iter, BfgsStatus::LineSearchFailed, last_step);
        };
        let s = &d * alpha;
        let y = &g_new - &g;
        x += &s;
        fx = f_new;
        g = g_new;
        last_step = s.norm();
        history.push(fx);

        let sy = s.dot(&y);
        if sy > 1e-300 {
            if !scaled {
                // Shanno-Phua scaling of the initial inverse Hessian.
                let gamma = sy / y.dot(&y);
                h = DMatrix::identity(n, n) * gamma;
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (s hy' + hy s') + (rho^2 yHy + rho) s s'
            h.ger(-rho, &s, &hy, 1.0);
            h.ger(-rho, &hy, &s, 1.0);
            h.ger(rho * rho * yhy + rho, &s, &s, 1.0);
        }

        if last_step < opts.step_tolerance {
            return done(x, fx, g, iter + 1, BfgsStatus::StepConverged, last_step);
        }
        if history.len() > opts.stall_window {
            let old = history[history.len() - 1 - opts.stall_window];
            if (old - fx).abs() <= opts.relative_tolerance * old.abs().max(1e-300) {
                return done(x, fx, g, iter + 1, BfgsStatus::Stalled, last_step);
            }
        }
    }
    let iters = opts.max_iterations;
    done(x, fx, g, iters, BfgsStatus::MaxIterations, last_step)
}

fn done(
    x: DVector<f64>,
    value: f64,
    gradient: DVector<f64>,
    iterations: usize,
    status: BfgsStatus,
    last_step: f64,
) -> BfgsResult {
    BfgsResult {
        x,
        value,
        gradient,
        iterations,
        status,
        last_step,
    }
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

/// Strong-Wolfe bracketing search with cubic-free bisection/secant zoom.
fn line_search<F>(
    f: &mut F,
    x: &DVector<f64>,
    f0: f64,
    d: &DVector<f64>,
    slope0: f64,
    alpha0: f64,
) -> Option<(f64, f64, DVector<f64>)>
where
    F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64,
{
    let n = x.len();
    let mut eval = |alpha: f64| {
        let xa = x + d * alpha;
        let mut ga = DVector::zeros(n);
        let fa = f(&xa, &mut ga);
        let sa = ga.dot(d);
        (fa, ga, sa)
    };

    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut s_prev = slope0;
    let mut alpha = alpha0;
    for i in 0..40 {
        let (fa, ga, sa) = eval(alpha);
        if !(fa.is_finite() && sa.is_finite()) {
            alpha = 0.5 * (a_prev + alpha);
            continue;
        }
        if fa > f0 + C1 * alpha * slope0 || (i > 0 && fa >= f_prev) {
            return zoom(&mut eval, f0, slope0, a_prev, f_prev, s_prev, alpha, fa, sa);
        }
        if sa.abs() <= -C2 * slope0 {
            return Some((alpha, fa, ga));
        }
        if sa >= 0.0 {
            return zoom(&mut eval, f0, slope0, alpha, fa, sa, a_prev, f_prev, s_prev);
        }
        a_prev = alpha;
        f_prev = fa;
        s_prev = sa;
        alpha *= 2.0;
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn zoom<E>(
    eval: &mut E,
    f0: f64,
    slope0: f64,
    mut a_lo: f64,
    mut f_lo: f64,
    mut s_lo: f64,
    mut a_hi: f64,
    mut f_hi: f64,
    mut s_hi: f64,
) -> Option<(f64, f64, DVector<f64>)>
where
    E: FnMut(f64) -> (f64, DVector<f64>, f64),
{
    let mut best: Option<(f64, f64, DVector<f64>)> = None;
    for _ in 0..60 {
        // Cubic interpolation when it lands safely inside the bracket.
        let lo = a_lo.min(a_hi);
        let hi = a_lo.max(a_hi);
        let width = hi - lo;
        let mut a = cubic_min(a_lo, f_lo, s_lo, a_hi, f_hi, s_hi).unwrap_or(0.5 * (a_lo + a_hi));
        if !(a > lo + 0.1 * width && a < hi - 0.1 * width) {
            a = 0.5 * (a_lo + a_hi);
        }
        let (fa, ga, sa) = eval(a);
        if fa.is_finite() && sa.is_finite() && fa < f0 && best.as_ref().is_none_or(|b| fa < b.1) {
            best = Some((a, fa, ga.clone()));
        }
        if !(fa.is_finite() && sa.is_finite()) || fa > f0 + C1 * a * slope0 || fa >= f_lo {
            a_hi = a;
            f_hi = fa;
            s_hi = sa;
        } else {
            if sa.abs() <= -C2 * slope0 {
                return Some((a, fa, ga));
            }
            if sa * (a_hi - a_lo) >= 0.0 {
                a_hi = a_lo;
                f_hi = f_lo;
                s_hi = s_lo;
            }
            a_lo = a;
            f_lo = fa;
            s_lo = sa;
        }
        if (a_hi - a_lo).abs() < 1e-16 * a_lo.abs().max(1e-300) {
            break;
        }
    }
    // Accept a plain sufficient decrease when the curvature condition cannot be met.
    best.filter(|(a, fa, _)| *fa <= f0 + C1 * a * slope0)
}

fn cubic_min(a: f64, fa: f64, ga: f64, b: f64, fb: f64, gb: f64) -> Option<f64> {
    if !(fa.is_finite() && fb.is_finite() && ga.is_finite() && gb.is_finite()) {
        return None;
    }
    let d1 = ga + gb - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - ga * gb;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = gb - ga + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let t = b - (b - a) * (gb + d2 - d1) / denom;
    t.is_finite().then_some(t)
}
