//! Single-fix multilateration from synchronized times of arrival.
//!
//! Propagation delay from sensor `i` to a target at `p` is
//! `|p - s_i| * n_eff(h_i, h_p) / c`, where `n_eff` is the path-averaged
//! refractive index. Two solvers are provided:
//!
//! * [`solve_position_ls`]: Gauss-Newton on squared TDoA residuals against the
//!   reference sensor (lowest id).
//! * [`solve_position_l1`]: BFGS on the smoothed 1-norm. The reference
//!   sensor's own timing error is carried as a fourth unknown, so a corrupted
//!   reference reception is an ordinary outlier rather than a shift of every
//!   difference.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atmosphere::{AtmosphereModel, SPEED_OF_LIGHT};
use crate::clocksync::SensorNoiseModel;
use crate::dataio::SensorId;
use crate::geo::{self, EcefPosition};
use crate::optim::{self, BfgsOptions};
use crate::robust::{median, smooth_abs, smooth_abs_deriv, DEFAULT_EPSILON_S};

/// Seconds per meter of vacuum propagation.
const S_PER_M: f64 = 1.0 / SPEED_OF_LIGHT;
/// Meters of vacuum propagation per nanosecond.
const M_PER_NS: f64 = SPEED_OF_LIGHT * 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlatError {
    #[error("invalid problem: {0}")]
    InvalidArgument(String),
    #[error("no solution: {0}")]
    NoSolution(String),
    #[error("geometry is singular")]
    IllConditioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionFlag {
    WellConditioned,
    IllConditioned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AltitudeConstraint {
    /// Always solve in 3D.
    #[default]
    Off,
    /// Fix the altitude to the barometric value only for three-reception records.
    WhenUnderdetermined,
    /// Fix the altitude whenever a barometric value is available.
    Always,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub max_iterations_bfgs: usize,
    pub step_tolerance_m: f64,
    pub epsilon_s: f64,
    pub condition_threshold: f64,
    /// Weight residuals by the per-sensor noise model.
    pub weighted: bool,
    pub altitude_constraint: AltitudeConstraint,
    /// 1-norm solver only: after a first solve, receptions whose arrival
    /// residual exceeds this many sigma are dropped and the fix is re-solved.
    /// Zero disables the second pass.
    pub reject_sigma: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 50,
            max_iterations_bfgs: 200,
            step_tolerance_m: 0.1,
            epsilon_s: DEFAULT_EPSILON_S,
            condition_threshold: 1e8,
            weighted: false,
            altitude_constraint: AltitudeConstraint::Off,
            reject_sigma: 5.0,
        }
    }
}

/// One localization problem: synchronized arrival times at known sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct TdoaProblem {
    /// Sorted ascending; index 0 is the reference sensor.
    pub sensor_ids: Vec<SensorId>,
    pub sensors: Vec<EcefPosition>,
    pub sensor_altitudes: Vec<f64>,
    /// Arrival times in seconds on the common timebase.
    pub toas: Vec<f64>,
    pub atmosphere: AtmosphereModel,
    pub noise: SensorNoiseModel,
    pub baro_altitude: Option<f64>,
}

impl TdoaProblem {
    /// Builds a problem from `(sensor id, position, toa seconds)` triples.
    pub fn new(
        mut receptions: Vec<(SensorId, EcefPosition, f64)>,
        atmosphere: AtmosphereModel,
        noise: SensorNoiseModel,
        baro_altitude: Option<f64>,
    ) -> Result<Self, MlatError> {
        receptions.sort_by_key(|r| r.0);
        for w in receptions.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(MlatError::InvalidArgument(format!("sensor {} listed twice", w[0].0)));
            }
        }
        for (i, a) in receptions.iter().enumerate() {
            if !a.2.is_finite() {
                return Err(MlatError::InvalidArgument("non-finite arrival time".into()));
            }
            for b in &receptions[i + 1..] {
                if a.1.distance(&b.1) < 1e-3 {
                    return Err(MlatError::InvalidArgument(format!(
                        "sensors {} and {} share a position",
                        a.0, b.0
                    )));
                }
            }
        }
        let sensor_altitudes = receptions.iter().map(|r| geo::ecef_to_geodetic_raw(&r.1).2).collect();
        Ok(TdoaProblem {
            sensor_ids: receptions.iter().map(|r| r.0).collect(),
            sensors: receptions.iter().map(|r| r.1).collect(),
            sensor_altitudes,
            toas: receptions.iter().map(|r| r.2).collect(),
            atmosphere,
            noise,
            baro_altitude,
        })
    }

    pub fn len(&self) -> usize {
        self.toas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.toas.is_empty()
    }

    fn constrained(&self, opts: &SolverOptions) -> bool {
        self.baro_altitude.is_some()
            && match opts.altitude_constraint {
                AltitudeConstraint::Off => false,
                AltitudeConstraint::WhenUnderdetermined => self.len() == 3,
                AltitudeConstraint::Always => true,
            }
    }

    fn check_solvable(&self, opts: &SolverOptions) -> Result<bool, MlatError> {
        let constrained = self.constrained(opts);
        let needed = if constrained { 3 } else { 4 };
        if self.len() < needed {
            return Err(MlatError::InvalidArgument(format!(
                "{} receptions cannot determine a position (need {needed})",
                self.len()
            )));
        }
        Ok(constrained)
    }

    /// One-way delay from sensor `i` to `p` and its gradient with respect to `p`.
    fn delay(&self, i: usize, p: &Vector3<f64>, target: &TargetAltitude) -> (f64, Vector3<f64>) {
        let d = p - self.sensors[i].to_vector();
        let len = d.norm();
        let (n, g) = self.atmosphere.mean_index_with_gradient(self.sensor_altitudes[i], target.altitude);
        let unit = if len > 0.0 { d / len } else { Vector3::zeros() };
        let grad = (unit * n + target.normal * (len * g.d_h2)) * S_PER_M;
        (len * n * S_PER_M, grad)
    }

    fn sigma_s(&self, i: usize) -> f64 {
        self.noise.sigma_for(self.sensor_ids[i]) * 1e-9
    }

    /// Emission time implied by a position: median of `toa_i - delay_i`.
    pub fn emission_time(&self, p: &EcefPosition) -> f64 {
        let v = p.to_vector();
        let t = TargetAltitude::at(&v);
        let times: Vec<f64> = (0..self.len()).map(|i| self.toas[i] - self.delay(i, &v, &t).0).collect();
        median(&times).unwrap_or(f64::NAN)
    }

    /// Arrival-time residuals (s) of every reception against the emission time implied by `p`.
    pub fn arrival_residuals(&self, p: &EcefPosition) -> Vec<f64> {
        let v = p.to_vector();
        let t = TargetAltitude::at(&v);
        let times: Vec<f64> = (0..self.len()).map(|i| self.toas[i] - self.delay(i, &v, &t).0).collect();
        let t0 = median(&times).unwrap_or(f64::NAN);
        times.iter().map(|x| x - t0).collect()
    }

    /// The problem restricted to the receptions at `keep` (indices into this problem).
    pub fn subset(&self, keep: &[usize]) -> TdoaProblem {
        TdoaProblem {
            sensor_ids: keep.iter().map(|i| self.sensor_ids[*i]).collect(),
            sensors: keep.iter().map(|i| self.sensors[*i]).collect(),
            sensor_altitudes: keep.iter().map(|i| self.sensor_altitudes[*i]).collect(),
            toas: keep.iter().map(|i| self.toas[*i]).collect(),
            atmosphere: self.atmosphere,
            noise: self.noise.clone(),
            baro_altitude: self.baro_altitude,
        }
    }

    /// Forward model: TDoA against the reference for every non-reference sensor.
    pub fn predicted_tdoas(&self, p: &EcefPosition) -> Vec<f64> {
        let v = p.to_vector();
        let t = TargetAltitude::at(&v);
        let d0 = self.delay(0, &v, &t).0;
        (1..self.len()).map(|i| self.delay(i, &v, &t).0 - d0).collect()
    }
}

/// Altitude of the target and the gradient of that altitude (the ellipsoid normal).
struct TargetAltitude {
    altitude: f64,
    normal: Vector3<f64>,
}

impl TargetAltitude {
    fn at(p: &Vector3<f64>) -> Self {
        let (lat, lon, alt) = geo::ecef_to_geodetic_raw(&EcefPosition::from_vector(p));
        TargetAltitude {
            altitude: alt,
            normal: geo::enu_basis(lat, lon)[2],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionSolution {
    pub position: EcefPosition,
    /// RMS of the TDoA residuals, seconds.
    pub residual_norm: f64,
    /// Median absolute TDoA residual, seconds.
    pub median_residual: f64,
    pub iterations: usize,
    pub condition_flag: ConditionFlag,
    /// Estimated emission time on the common timebase, seconds.
    pub aircraft_time: f64,
}

/// Differences against the reference (lowest sensor id): `(index, toa_i - toa_ref)`.
pub fn tdoa_from_toas(problem: &TdoaProblem) -> Result<Vec<(usize, f64)>, MlatError> {
    if problem.len() < 2 {
        return Err(MlatError::InvalidArgument("need at least two receptions".into()));
    }
    let t0 = problem.toas[0];
    Ok((1..problem.len()).map(|i| (i, problem.toas[i] - t0)).collect())
}

/// Half the weighted sum of squared TDoA residuals (in meters) and its gradient.
pub fn ls_objective(problem: &TdoaProblem, p: &EcefPosition, weighted: bool) -> (f64, Vector3<f64>) {
    let (r, j, w) = ls_system(problem, &p.to_vector(), weighted);
    let mut f = 0.0;
    let mut g = Vector3::zeros();
    for k in 0..r.len() {
        f += 0.5 * w[k] * r[k] * r[k];
        g -= j[k] * (w[k] * r[k]);
    }
    (f, g)
}

/// Residuals (meters), Jacobian rows of the prediction (meters per meter) and weights.
fn ls_system(problem: &TdoaProblem, p: &Vector3<f64>, weighted: bool) -> (Vec<f64>, Vec<Vector3<f64>>, Vec<f64>) {
    let tgt = TargetAltitude::at(p);
    let (d0, g0) = problem.delay(0, p, &tgt);
    let n = problem.len() - 1;
    let mut r = Vec::with_capacity(n);
    let mut j = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let s0 = problem.sigma_s(0);
    for i in 1..problem.len() {
        let (di, gi) = problem.delay(i, p, &tgt);
        let m = problem.toas[i] - problem.toas[0];
        r.push((m - (di - d0)) * SPEED_OF_LIGHT);
        j.push((gi - g0) * SPEED_OF_LIGHT);
        w.push(if weighted {
            let si = problem.sigma_s(i);
            // normalized so uniform sigmas give unit weights
            2.0 * s0 * s0 / (si * si + s0 * s0)
        } else {
            1.0
        });
    }
    (r, j, w)
}

/// Fixes deeper than this below the ellipsoid trigger a retry from the mirrored altitude.
const MIRROR_ALTITUDE_M: f64 = -500.0;

/// With receivers spread over a near-planar region the TDoA surfaces have a
/// second intersection reflected through the receiver plane, usually far
/// underground. When a solve lands there, restart from the reflected point
/// and keep the reflected fit when it is above ground or fits better.
fn with_mirror_retry<F>(problem: &TdoaProblem, guess: &EcefPosition, mut solve: F) -> Result<PositionSolution, MlatError>
where
    F: FnMut(&EcefPosition) -> Result<(PositionSolution, f64), MlatError>,
{
    let (first, cost) = solve(guess)?;
    let (lat, lon, alt) = geo::ecef_to_geodetic_raw(&first.position);
    if alt >= MIRROR_ALTITUDE_M {
        return Ok(first);
    }
    let plane = problem.sensor_altitudes.iter().sum::<f64>() / problem.len() as f64;
    let mirrored = geo::geodetic_to_ecef_unchecked(lat, lon, 2.0 * plane - alt);
    match solve(&mirrored) {
        Ok((second, cost2)) if cost2 <= cost || geo::ecef_to_geodetic_raw(&second.position).2 >= MIRROR_ALTITUDE_M => Ok(PositionSolution {
            iterations: first.iterations + second.iterations,
            ..second
        }),
        _ => Ok(first),
    }
}

/// Gauss-Newton least squares on the TDoA residuals.
pub fn solve_position_ls(problem: &TdoaProblem, guess: &EcefPosition, opts: &SolverOptions) -> Result<PositionSolution, MlatError> {
    problem.check_solvable(opts)?;
    with_mirror_retry(problem, guess, |g| {
        let sol = solve_ls_once(problem, g, opts)?;
        let cost = ls_objective(problem, &sol.position, opts.weighted).0;
        Ok((sol, cost))
    })
}

fn solve_ls_once(problem: &TdoaProblem, guess: &EcefPosition, opts: &SolverOptions) -> Result<PositionSolution, MlatError> {
    let constrained = problem.check_solvable(opts)?;
    let mut p = if constrained {
        lift_to_altitude(guess, problem.baro_altitude.unwrap())
    } else {
        guess.to_vector()
    };
    let cost = |p: &Vector3<f64>| -> f64 {
        let (r, _, w) = ls_system(problem, p, opts.weighted);
        r.iter().zip(&w).map(|(r, w)| 0.5 * w * r * r).sum()
    };
    let mut current = cost(&p);
    let mut iterations = 0;
    let mut flag = ConditionFlag::WellConditioned;
    for it in 0..opts.max_iterations {
        iterations = it + 1;
        let (r, j, w) = ls_system(problem, &p, opts.weighted);
        let (step, cond) = if constrained {
            let (lat, lon, _) = geo::ecef_to_geodetic_raw(&EcefPosition::from_vector(&p));
            let enu = geo::enu_basis(lat, lon);
            let mut a = Matrix2::zeros();
            let mut b = Vector2::zeros();
            for k in 0..r.len() {
                let row = Vector2::new(j[k].dot(&enu[0]), j[k].dot(&enu[1]));
                a += row * row.transpose() * w[k];
                b += row * (w[k] * r[k]);
            }
            let (delta, cond) = solve_normal2(&a, &b)?;
            let next = horizontal_move(&p, delta[0], delta[1], problem.baro_altitude.unwrap());
            (next - p, cond)
        } else {
            let mut a = Matrix3::zeros();
            let mut b = Vector3::zeros();
            for k in 0..r.len() {
                a += j[k] * j[k].transpose() * w[k];
                b += j[k] * (w[k] * r[k]);
            }
            solve_normal3(&a, &b)?
        };
        flag = if cond > opts.condition_threshold {
            ConditionFlag::IllConditioned
        } else {
            ConditionFlag::WellConditioned
        };
        // Safeguard: halve the step until the cost stops increasing.
        let mut scale = 1.0;
        let mut next = p + step;
        let mut next_cost = cost(&next);
        let mut halvings = 0;
        while !(next_cost <= current) && halvings < 12 {
            scale *= 0.5;
            next = p + step * scale;
            next_cost = cost(&next);
            halvings += 1;
        }
        if !(next_cost <= current) {
            // no decrease along the Gauss-Newton direction: at a (local) minimum
            break;
        }
        let moved = (next - p).norm();
        p = if constrained {
            lift_to_altitude(&EcefPosition::from_vector(&next), problem.baro_altitude.unwrap())
        } else {
            next
        };
        current = cost(&p);
        if !EcefPosition::from_vector(&p).is_near_earth() {
            return Err(MlatError::NoSolution("iteration left the vicinity of the Earth".into()));
        }
        if moved < opts.step_tolerance_m {
            break;
        }
    }
    Ok(finish(problem, EcefPosition::from_vector(&p), iterations, flag))
}

fn solve_normal3(a: &Matrix3<f64>, b: &Vector3<f64>) -> Result<(Vector3<f64>, f64), MlatError> {
    let eig = SymmetricEigen::new(*a);
    let max = eig.eigenvalues.max();
    if !(max.is_finite() && max > 0.0) {
        return Err(MlatError::IllConditioned);
    }
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    // Pseudo-inverse: directions with negligible curvature are not moved along.
    let mut x = Vector3::zeros();
    for k in 0..3 {
        let l = eig.eigenvalues[k];
        if l > max * 1e-14 {
            let v = eig.eigenvectors.column(k);
            x += v * (v.dot(b) / l);
        }
    }
    Ok((x, cond))
}

fn solve_normal2(a: &Matrix2<f64>, b: &Vector2<f64>) -> Result<(Vector2<f64>, f64), MlatError> {
    let eig = SymmetricEigen::new(*a);
    let max = eig.eigenvalues.max();
    if !(max.is_finite() && max > 0.0) {
        return Err(MlatError::IllConditioned);
    }
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    let mut x = Vector2::zeros();
    for k in 0..2 {
        let l = eig.eigenvalues[k];
        if l > max * 1e-14 {
            let v = eig.eigenvectors.column(k);
            x += v * (v.dot(b) / l);
        }
    }
    Ok((x, cond))
}

/// Condition number of the Gauss-Newton normal matrix at `p` (3D).
pub fn condition_number(problem: &TdoaProblem, p: &EcefPosition) -> f64 {
    let (_, j, _) = ls_system(problem, &p.to_vector(), false);
    let a = j.iter().fold(Matrix3::zeros(), |acc, row| acc + row * row.transpose());
    let eig = SymmetricEigen::new(a);
    let (max, min) = (eig.eigenvalues.max(), eig.eigenvalues.min());
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

fn finish(problem: &TdoaProblem, p: EcefPosition, iterations: usize, flag: ConditionFlag) -> PositionSolution {
    let pred = problem.predicted_tdoas(&p);
    let res: Vec<f64> = tdoa_from_toas(problem)
        .expect("solvable problems have >= 2 receptions")
        .iter()
        .zip(&pred)
        .map(|((_, m), q)| m - q)
        .collect();
    let rms = (res.iter().map(|r| r * r).sum::<f64>() / res.len() as f64).sqrt();
    let abs: Vec<f64> = res.iter().map(|r| r.abs()).collect();
    PositionSolution {
        position: p,
        residual_norm: rms,
        median_residual: median(&abs).unwrap_or(0.0),
        iterations,
        condition_flag: flag,
        aircraft_time: problem.emission_time(&p),
    }
}

fn lift_to_altitude(p: &EcefPosition, altitude: f64) -> Vector3<f64> {
    let (lat, lon, _) = geo::ecef_to_geodetic_raw(p);
    geo::geodetic_to_ecef_unchecked(lat, lon, altitude).to_vector()
}

fn horizontal_move(p: &Vector3<f64>, east: f64, north: f64, altitude: f64) -> Vector3<f64> {
    let (lat, lon, _) = geo::ecef_to_geodetic_raw(&EcefPosition::from_vector(p));
    let base = geo::GeodeticPosition {
        latitude: lat,
        longitude: lon,
        altitude,
    };
    let q = geo::offset_horizontal(&base, east, north);
    geo::geodetic_to_ecef_unchecked(q.latitude, q.longitude, q.altitude).to_vector()
}

/// Smoothed 1-norm objective over all arrival times.
///
/// `x = [px, py, pz, beta]` where `beta` (meters of light travel) is the
/// timing error of the reference reception. Residuals are in nanoseconds.
pub fn l1_objective(problem: &TdoaProblem, x: &[f64; 4], eps_s: f64, weighted: bool) -> (f64, [f64; 4]) {
    let p = Vector3::new(x[0], x[1], x[2]);
    let tgt = TargetAltitude::at(&p);
    l1_terms(problem, &p, &tgt, x[3], eps_s, weighted)
}

fn l1_terms(problem: &TdoaProblem, p: &Vector3<f64>, tgt: &TargetAltitude, beta_m: f64, eps_s: f64, weighted: bool) -> (f64, [f64; 4]) {
    let eps_ns = eps_s * 1e9;
    let (d0, g0) = problem.delay(0, p, tgt);
    let s_ref = problem.sigma_s(0);
    let mut f = 0.0;
    let mut g = [0.0; 4];
    for i in 0..problem.len() {
        let (di, gi) = if i == 0 { (d0, g0) } else { problem.delay(i, p, tgt) };
        let m = problem.toas[i] - problem.toas[0];
        let r_ns = (m - (di - d0)) * 1e9 + beta_m / M_PER_NS;
        let w = if weighted { s_ref / problem.sigma_s(i) } else { 1.0 };
        f += w * smooth_abs(r_ns, eps_ns);
        let dr = w * smooth_abs_deriv(r_ns, eps_ns);
        let dp = -(gi - g0) * 1e9;
        g[0] += dr * dp.x;
        g[1] += dr * dp.y;
        g[2] += dr * dp.z;
        g[3] += dr / M_PER_NS;
    }
    (f, g)
}

/// Quasi-Newton minimization of the smoothed 1-norm.
pub fn solve_position_l1(problem: &TdoaProblem, guess: &EcefPosition, opts: &SolverOptions) -> Result<PositionSolution, MlatError> {
    let constrained = problem.check_solvable(opts)?;
    let first = with_mirror_retry(problem, guess, |g| solve_l1_once(problem, g, opts))?;
    if !(opts.reject_sigma > 0.0) {
        return Ok(first);
    }
    let res = problem.arrival_residuals(&first.position);
    let keep: Vec<usize> = (0..problem.len())
        .filter(|i| res[*i].abs() <= opts.reject_sigma * problem.sigma_s(*i))
        .collect();
    let needed = if constrained { 3 } else { 4 };
    if keep.len() == problem.len() || keep.len() < needed {
        return Ok(first);
    }
    let reduced = problem.subset(&keep);
    let second = with_mirror_retry(&reduced, &first.position, |g| solve_l1_once(&reduced, g, opts))?;
    Ok(PositionSolution {
        iterations: first.iterations + second.iterations,
        ..second
    })
}

fn solve_l1_once(problem: &TdoaProblem, guess: &EcefPosition, opts: &SolverOptions) -> Result<(PositionSolution, f64), MlatError> {
    let constrained = problem.check_solvable(opts)?;
    let bfgs = BfgsOptions {
        max_iterations: opts.max_iterations_bfgs,
        gradient_tolerance: 1e-9,
        step_tolerance: opts.step_tolerance_m * 0.1,
        relative_tolerance: 1e-12,
        stall_window: 5,
    };
    let eps = opts.epsilon_s;
    let weighted = opts.weighted;
    let (position, iterations, value) = if constrained {
        let alt = problem.baro_altitude.unwrap();
        let base_v = lift_to_altitude(guess, alt);
        let (lat0, lon0, _) = geo::ecef_to_geodetic_raw(&EcefPosition::from_vector(&base_v));
        let map = HorizontalChart::new(lat0, lon0, alt);
        let rows = |x: &DVector<f64>| -> Vec<DVector<f64>> {
            let (p, de, dn) = map.point_and_tangents(x[0], x[1]);
            residual_jacobian(problem, &p, weighted)
                .into_iter()
                .map(|(dp, db)| DVector::from_vec(vec![dp.dot(&de), dp.dot(&dn), db]))
                .collect()
        };
        let (x, iterations, value) = continuation(eps, 3, &bfgs, rows, |eps_k, x, grad| {
            let (p, de, dn) = map.point_and_tangents(x[0], x[1]);
            let tgt = TargetAltitude::at(&p);
            let (v, g) = l1_terms(problem, &p, &tgt, x[2], eps_k, weighted);
            let gp = Vector3::new(g[0], g[1], g[2]);
            grad[0] = gp.dot(&de);
            grad[1] = gp.dot(&dn);
            grad[2] = g[3];
            v
        })?;
        (map.point_and_tangents(x[0], x[1]).0, iterations, value)
    } else {
        let origin = guess.to_vector();
        let rows = |x: &DVector<f64>| -> Vec<DVector<f64>> {
            let p = origin + Vector3::new(x[0], x[1], x[2]);
            residual_jacobian(problem, &p, weighted)
                .into_iter()
                .map(|(dp, db)| DVector::from_vec(vec![dp.x, dp.y, dp.z, db]))
                .collect()
        };
        let (x, iterations, value) = continuation(eps, 4, &bfgs, rows, |eps_k, x, grad| {
            let p = origin + Vector3::new(x[0], x[1], x[2]);
            let (v, g) = l1_objective(problem, &[p.x, p.y, p.z, x[3]], eps_k, weighted);
            grad.copy_from_slice(&g);
            v
        })?;
        (origin + Vector3::new(x[0], x[1], x[2]), iterations, value)
    };
    let p = EcefPosition::from_vector(&position);
    if !p.is_near_earth() {
        return Err(MlatError::NoSolution("solution left the vicinity of the Earth".into()));
    }
    let cond = condition_number(problem, &p);
    let flag = if cond > opts.condition_threshold {
        ConditionFlag::IllConditioned
    } else {
        ConditionFlag::WellConditioned
    };
    Ok((finish(problem, p, iterations, flag), value))
}

/// Weighted arrival residual derivatives `(d r / d p, d r / d beta)` in ns per meter.
fn residual_jacobian(problem: &TdoaProblem, p: &Vector3<f64>, weighted: bool) -> Vec<(Vector3<f64>, f64)> {
    let tgt = TargetAltitude::at(p);
    let (_, g0) = problem.delay(0, p, &tgt);
    let s_ref = problem.sigma_s(0);
    (0..problem.len())
        .map(|i| {
            let (_, gi) = problem.delay(i, p, &tgt);
            let w = if weighted { s_ref / problem.sigma_s(i) } else { 1.0 };
            (-(gi - g0) * 1e9 * w, w / M_PER_NS)
        })
        .collect()
}

/// `T` with `T^T (J^T J + ridge) T = I`, so that in `z = T^-1 x` the
/// linearized residuals are close to isotropic. Altitude is weakly observed
/// by TDoA and would otherwise be far flatter than the horizontal directions.
/// The ridge caps the anisotropy: near the receiver plane the vertical is
/// not observed at all, and unbounded vertical steps jump into the mirror
/// solution below ground.
fn whitening(rows: &[DVector<f64>]) -> DMatrix<f64> {
    const MAX_CONDITION: f64 = 1e2;
    let n = rows[0].len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for r in rows {
        a += r * r.transpose();
    }
    let ridge = (0..n).map(|i| a[(i, i)]).fold(0.0, f64::max) / MAX_CONDITION;
    for i in 0..n {
        a[(i, i)] += ridge.max(f64::MIN_POSITIVE);
    }
    a.cholesky()
        .and_then(|c| c.l().transpose().try_inverse())
        .filter(|t| t.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| DMatrix::identity(n, n))
}

/// Minimizes with a decreasing smoothing width, ending at `eps`. Far from the
/// optimum a narrow transition makes the objective nearly piecewise linear,
/// which stalls quasi-Newton steps; widening it first avoids that. Each stage
/// runs in coordinates whitened at its starting point.
fn continuation<R, F>(eps: f64, n: usize, bfgs: &BfgsOptions, rows: R, mut f: F) -> Result<(DVector<f64>, usize, f64), MlatError>
where
    R: Fn(&DVector<f64>) -> Vec<DVector<f64>>,
    F: FnMut(f64, &DVector<f64>, &mut DVector<f64>) -> f64,
{
    let mut x = DVector::zeros(n);
    let mut gx = DVector::zeros(n);
    let mut iterations = 0;
    let mut value = f64::NAN;
    for scale in [1000.0, 100.0, 10.0, 1.0] {
        let eps_k = eps * scale;
        let t = whitening(&rows(&x));
        let x0 = x.clone();
        let r = optim::minimize(
            |z: &DVector<f64>, g: &mut DVector<f64>| {
                let v = f(eps_k, &(&x0 + &t * z), &mut gx);
                g.copy_from(&(t.transpose() * &gx));
                v
            },
            DVector::zeros(n),
            bfgs,
        );
        if !r.value.is_finite() {
            return Err(MlatError::NoSolution("objective is not finite".into()));
        }
        iterations += r.iterations;
        value = r.value;
        x = &x0 + &t * r.x;
    }
    Ok((x, iterations, value))
}

/// Horizontal east/north chart around a base point at fixed altitude, with
/// exact tangent vectors of the chart map.
struct HorizontalChart {
    lat0: f64,
    lon0: f64,
    alt: f64,
    m0: f64,
    n0: f64,
}

impl HorizontalChart {
    fn new(lat0: f64, lon0: f64, alt: f64) -> Self {
        let (m0, n0) = geo::radii_of_curvature(lat0);
        HorizontalChart { lat0, lon0, alt, m0, n0 }
    }

    fn point_and_tangents(&self, east: f64, north: f64) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let lat = self.lat0 + (north / (self.m0 + self.alt)).to_degrees();
        let lon = self.lon0 + (east / ((self.n0 + self.alt) * self.lat0.to_radians().cos())).to_degrees();
        let p = geo::geodetic_to_ecef_unchecked(lat, lon, self.alt).to_vector();
        let (m, n) = geo::radii_of_curvature(lat);
        let enu = geo::enu_basis(lat, lon);
        let d_north = enu[1] * ((m + self.alt) / (self.m0 + self.alt));
        let d_east = enu[0]
            * ((n + self.alt) * lat.to_radians().cos() / ((self.n0 + self.alt) * self.lat0.to_radians().cos()));
        (p, d_east, d_north)
    }
}

/// Starting point for the solvers: a recent previous fix, otherwise the
/// sensor barycenter lifted to the barometric altitude when known.
pub fn initial_guess(problem: &TdoaProblem, previous: Option<&PositionSolution>) -> EcefPosition {
    const MAX_AGE_S: f64 = 60.0;
    if let Some(prev) = previous {
        let now = problem.toas.iter().copied().fold(f64::INFINITY, f64::min);
        if (now - prev.aircraft_time).abs() < MAX_AGE_S {
            return prev.position;
        }
    }
    let weights = vec![1.0; problem.len()];
    let center = geo::weighted_barycenter(&problem.sensors, &weights).expect("non-empty problem");
    match problem.baro_altitude {
        Some(alt) => EcefPosition::from_vector(&lift_to_altitude(&center, alt)),
        None => center,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeodeticPosition;

    fn sensor(lat: f64, lon: f64, h: f64) -> EcefPosition {
        GeodeticPosition::new(lat, lon, h).unwrap().to_ecef().unwrap()
    }

    fn problem_for(target: &EcefPosition, sensors: &[EcefPosition], atm: AtmosphereModel, baro: Option<f64>) -> TdoaProblem {
        let t0 = 100.0;
        let tgt_alt = geo::ecef_to_geodetic_raw(target).2;
        let rx = sensors
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let h = geo::ecef_to_geodetic_raw(s).2;
                let toa = t0 + atm.propagation_time(s.distance(target), h, tgt_alt);
                (i as SensorId + 1, *s, toa)
            })
            .collect();
        TdoaProblem::new(rx, atm, SensorNoiseModel::default(), baro).unwrap()
    }

    fn spread_sensors() -> Vec<EcefPosition> {
        vec![
            sensor(47.0, 7.0, 400.0),
            sensor(48.2, 8.1, 300.0),
            sensor(46.3, 8.9, 800.0),
            sensor(47.6, 10.0, 500.0),
            sensor(46.8, 6.2, 200.0),
            sensor(48.5, 6.8, 350.0),
        ]
    }

    #[test]
    fn tdoa_counting_and_symmetry() {
        let target = sensor(47.3, 8.0, 9000.0);
        let p = problem_for(&target, &spread_sensors()[..4], AtmosphereModel::vacuum(), None);
        assert_eq!(tdoa_from_toas(&p).unwrap().len(), 3);
        // equidistant pair
        let a = sensor(47.0, 7.0, 0.0);
        let b = sensor(47.0, 9.0, 0.0);
        let mid = sensor(47.2, 8.0, 10000.0);
        let p = problem_for(&mid, &[a, b], AtmosphereModel::vacuum(), None);
        assert!(tdoa_from_toas(&p).unwrap()[0].1.abs() < 1e-12);
        let one = TdoaProblem::new(vec![(1, a, 0.0)], AtmosphereModel::vacuum(), SensorNoiseModel::default(), None).unwrap();
        assert!(tdoa_from_toas(&one).is_err());
    }

    #[test]
    fn ls_recovers_noiseless_fix() {
        let target = sensor(47.3, 8.0, 9000.0);
        let atm = AtmosphereModel::new(3e-4, 1.2e-4).unwrap();
        let p = problem_for(&target, &spread_sensors(), atm, Some(9000.0));
        let guess = initial_guess(&p, None);
        let sol = solve_position_ls(&p, &guess, &SolverOptions::default()).unwrap();
        assert!(sol.position.distance(&target) < 0.5, "{}", sol.position.distance(&target));
        assert!((sol.aircraft_time - 100.0).abs() < 1e-9);
        let exact = solve_position_ls(&p, &target, &SolverOptions::default()).unwrap();
        assert!(exact.iterations <= 2);
        assert!(exact.position.distance(&target) < 1e-3);
    }

    #[test]
    fn l1_matches_ls_on_clean_data() {
        let target = sensor(46.9, 8.4, 11000.0);
        let atm = AtmosphereModel::new(3e-4, 1.2e-4).unwrap();
        let p = problem_for(&target, &spread_sensors(), atm, None);
        let guess = initial_guess(&p, None);
        let ls = solve_position_ls(&p, &guess, &SolverOptions::default()).unwrap();
        let l1 = solve_position_l1(&p, &guess, &SolverOptions::default()).unwrap();
        assert!(l1.position.distance(&ls.position) < 1.0, "{}", l1.position.distance(&ls.position));
        assert!(l1.position.distance(&target) < 1.0);
    }

    #[test]
    fn three_receptions_need_altitude_constraint() {
        let target = sensor(47.3, 8.0, 9000.0);
        let s = spread_sensors();
        let p = problem_for(&target, &s[..3], AtmosphereModel::vacuum(), Some(9000.0));
        let g = initial_guess(&p, None);
        assert!(matches!(solve_position_l1(&p, &g, &SolverOptions::default()), Err(MlatError::InvalidArgument(_))));
        assert!(matches!(solve_position_ls(&p, &g, &SolverOptions::default()), Err(MlatError::InvalidArgument(_))));
        let opts = SolverOptions {
            altitude_constraint: AltitudeConstraint::WhenUnderdetermined,
            ..Default::default()
        };
        let ls = solve_position_ls(&p, &g, &opts).unwrap();
        assert!(ls.position.distance(&target) < 1.0, "{}", ls.position.distance(&target));
        let l1 = solve_position_l1(&p, &g, &opts).unwrap();
        assert!(l1.position.distance(&target) < 1.0, "{}", l1.position.distance(&target));
    }

    #[test]
    fn collinear_sensors_flag_ill_conditioning() {
        // Sensors on a straight east-west line through a base point; target in their vertical plane.
        let base = GeodeticPosition::new(45.0, 8.0, 0.0).unwrap();
        let origin = base.to_ecef().unwrap().to_vector();
        let [east, _, up] = geo::enu_basis(45.0, 8.0);
        let sensors: Vec<EcefPosition> = [-60e3, -20e3, 15e3, 50e3, 80e3]
            .iter()
            .map(|d| EcefPosition::from_vector(&(origin + east * *d)))
            .collect();
        let target = EcefPosition::from_vector(&(origin + east * 10e3 + up * 9000.0));
        let p = problem_for(&target, &sensors, AtmosphereModel::vacuum(), None);
        let guess = EcefPosition::from_vector(&(target.to_vector() + up * 300.0 + east * 200.0));
        let sol = solve_position_ls(&p, &guess, &SolverOptions::default()).unwrap();
        assert_eq!(sol.condition_flag, ConditionFlag::IllConditioned);
    }

    #[test]
    fn initial_guess_rules() {
        let a = sensor(47.0, 7.0, 100.0);
        let b = sensor(47.0, 9.0, 100.0);
        let p = TdoaProblem::new(
            vec![(1, a, 10.0), (2, b, 10.0)],
            AtmosphereModel::vacuum(),
            SensorNoiseModel::default(),
            Some(9000.0),
        )
        .unwrap();
        let g = initial_guess(&p, None).to_geodetic().unwrap();
        assert!((g.altitude - 9000.0).abs() < 1e-6);
        assert!((g.longitude - 8.0).abs() < 1e-9);
        let prev = PositionSolution {
            position: sensor(47.5, 8.0, 8000.0),
            residual_norm: 0.0,
            median_residual: 0.0,
            iterations: 1,
            condition_flag: ConditionFlag::WellConditioned,
            aircraft_time: 5.0,
        };
        assert_eq!(initial_guess(&p, Some(&prev)), prev.position);
        let stale = PositionSolution { aircraft_time: -100.0, ..prev };
        assert_ne!(initial_guess(&p, Some(&stale)), prev.position);
    }
}
