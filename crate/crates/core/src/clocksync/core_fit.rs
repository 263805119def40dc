//! Joint fit of the GPS-disciplined core: sensor positions, constant clock
//! offsets and the two atmosphere parameters, from aircraft with known
//! positions. Residuals are arrival-time differences against the first core
//! sensor present in each record, under the smoothed 1-norm.

use std::collections::{BTreeMap, HashMap, VecDeque};

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{ClockModel, SensorNoiseModel, SensorStatus, SensorSync, SyncError, SyncState};
use crate::atmosphere::{AtmosphereModel, SPEED_OF_LIGHT};
use crate::dataio::{MeasurementSet, SensorId};
use crate::exec::Execution;
use crate::geo::{self, EcefPosition};
use crate::optim::{self, BfgsOptions, BfgsStatus};
use crate::robust::{median, smooth_abs, smooth_abs_deriv, DEFAULT_EPSILON_S};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoreFitOptions {
    /// Upper bound on training records used (evenly strided subset).
    pub max_records: usize,
    pub max_iterations: usize,
    /// Sensors may move strictly less than this from their reported position.
    pub position_bound_m: f64,
    pub fit_positions: bool,
    pub fit_atmosphere: bool,
    pub epsilon_s: f64,
}

impl Default for CoreFitOptions {
    fn default() -> Self {
        CoreFitOptions {
            max_records: 3000,
            max_iterations: 5000,
            position_bound_m: 500.0,
            fit_positions: true,
            fit_atmosphere: true,
            epsilon_s: DEFAULT_EPSILON_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreFit {
    pub sensor_ids: Vec<SensorId>,
    pub positions: BTreeMap<SensorId, EcefPosition>,
    /// Constant offset of each core clock relative to the first core sensor, ns.
    pub offsets_ns: BTreeMap<SensorId, f64>,
    pub atmosphere: AtmosphereModel,
    pub residual_median_ns: f64,
    pub residual_p90_ns: f64,
    pub n_records: usize,
    pub n_residuals: usize,
    pub iterations: usize,
}

/// Picks up to `size` GPS sensors, ranked by the number of truth-labeled
/// records they share with at least three other GPS sensors (ties by id).
pub fn select_core(set: &MeasurementSet, size: usize) -> Result<Vec<SensorId>, SyncError> {
    let gps: Vec<SensorId> = set.sensors.iter().filter(|s| s.synchronized).map(|s| s.sensor_id).collect();
    let mut counts: HashMap<SensorId, usize> = HashMap::new();
    for rec in set.training_records() {
        let present: Vec<SensorId> = rec
            .receptions
            .iter()
            .map(|r| r.sensor_id)
            .filter(|id| set.sensors.get(*id).is_some_and(|s| s.synchronized))
            .collect();
        if present.len() >= 4 {
            for id in present {
                *counts.entry(id).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(SensorId, usize)> = gps.iter().map(|id| (*id, counts.get(id).copied().unwrap_or(0))).collect();
    ranked.retain(|(_, c)| *c > 0);
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(size);
    if ranked.len() < 4 {
        return Err(SyncError::InvalidArgument(format!(
            "only {} GPS sensors share enough records to form a core (need 4)",
            ranked.len()
        )));
    }
    let mut ids: Vec<SensorId> = ranked.into_iter().map(|(id, _)| id).collect();
    ids.sort_unstable();
    Ok(ids)
}

/// One training record reduced to the core receptions.
struct Obs {
    target: Vector3<f64>,
    target_alt: f64,
    /// Core indices, first entry is the in-record reference.
    idx: Vec<usize>,
    /// Raw arrival differences against the reference, ns.
    m_ns: Vec<f64>,
}

/// Sensor state derived from the current parameter vector.
struct SensorGeom {
    pos: Vector3<f64>,
    alt: f64,
    normal: Vector3<f64>,
    /// d(position)/d(raw parameter).
    jac: Matrix3<f64>,
}

struct Layout {
    k: usize,
}

impl Layout {
    fn n(&self) -> usize {
        3 * self.k + (self.k - 1) + 2
    }
    fn pos(&self, s: usize) -> usize {
        3 * s
    }
    /// Offset parameter of sensor `s` (none for the reference sensor 0).
    fn off(&self, s: usize) -> Option<usize> {
        (s > 0).then(|| 3 * self.k + s - 1)
    }
    fn q(&self) -> usize {
        3 * self.k + self.k - 1
    }
    fn w(&self) -> usize {
        self.q() + 1
    }
}

/// Displacement `R tanh(|p|/R) p/|p|` and its Jacobian.
fn bounded_displacement(p: &Vector3<f64>, r: f64) -> (Vector3<f64>, Matrix3<f64>) {
    let s = p.norm();
    let x = s / r;
    if x < 1e-4 {
        // g(s) = 1 - x^2/3 + ..., g'(s)/s = -2/(3 R^2)
        let g = 1.0 - x * x / 3.0;
        let dg_over_s = -2.0 / (3.0 * r * r);
        return (p * g, Matrix3::identity() * g + p * p.transpose() * dg_over_s);
    }
    let th = x.tanh();
    let g = r * th / s;
    let sech2 = 1.0 - th * th;
    let dg = (sech2 * s - r * th) / (s * s);
    (p * g, Matrix3::identity() * g + p * p.transpose() * (dg / s))
}

const B_MAX: f64 = 1e-2;

/// Unknowns of the fit in physical form.
struct Params {
    geoms: Vec<SensorGeom>,
    offsets: Vec<f64>,
    atm: AtmosphereModel,
    da0_dq: f64,
    db_dw: f64,
}

fn unpack(x: &DVector<f64>, lay: &Layout, base: &[Vector3<f64>], bound: f64) -> Params {
    let geoms = (0..lay.k)
        .map(|s| {
            let p = Vector3::new(x[lay.pos(s)], x[lay.pos(s) + 1], x[lay.pos(s) + 2]);
            let (d, jac) = bounded_displacement(&p, bound);
            let pos = base[s] + d;
            let (lat, lon, alt) = geo::ecef_to_geodetic_raw(&EcefPosition::from_vector(&pos));
            SensorGeom {
                pos,
                alt,
                normal: geo::enu_basis(lat, lon)[2],
                jac,
            }
        })
        .collect();
    let offsets = (0..lay.k).map(|s| lay.off(s).map_or(0.0, |i| x[i])).collect();
    let q = x[lay.q()];
    let w = x[lay.w()];
    // logistic map keeps the scale height inside the valid range
    let sig = 1.0 / (1.0 + (-w).exp());
    let b = B_MAX * sig;
    Params {
        geoms,
        offsets,
        atm: AtmosphereModel { a0: 1e-4 * q * q, b },
        da0_dq: 2e-4 * q,
        db_dw: b * (1.0 - sig),
    }
}

/// Delay (s) and its gradients with respect to sensor position, a0 and b.
fn delay(obs: &Obs, g: &SensorGeom, atm: &AtmosphereModel) -> (f64, Vector3<f64>, f64, f64) {
    let d = obs.target - g.pos;
    let len = d.norm();
    let (n, grad) = atm.mean_index_with_gradient(g.alt, obs.target_alt);
    let u = d / len;
    let d_pos = (-u * n + g.normal * (len * grad.d_h1)) / SPEED_OF_LIGHT;
    (len * n / SPEED_OF_LIGHT, d_pos, len * grad.d_a0 / SPEED_OF_LIGHT, len * grad.d_b / SPEED_OF_LIGHT)
}

fn residuals(obs: &Obs, p: &Params) -> Vec<f64> {
    let r0 = obs.idx[0];
    let d0 = delay(obs, &p.geoms[r0], &p.atm).0;
    (1..obs.idx.len())
        .map(|e| {
            let s = obs.idx[e];
            let ds = delay(obs, &p.geoms[s], &p.atm).0;
            obs.m_ns[e] - (ds - d0) * 1e9 - (p.offsets[s] - p.offsets[r0])
        })
        .collect()
}

fn objective(chunk: &[Obs], p: &Params, lay: &Layout, eps_ns: f64) -> (f64, Vec<f64>) {
    let mut f = 0.0;
    let mut g = vec![0.0; lay.n()];
    let mut d_a0 = 0.0;
    let mut d_b = 0.0;
    for obs in chunk {
        let r0 = obs.idx[0];
        let (d0, dp0, da0_0, db_0) = delay(obs, &p.geoms[r0], &p.atm);
        let mut gref = Vector3::zeros();
        for e in 1..obs.idx.len() {
            let s = obs.idx[e];
            let (ds, dps, da0_s, db_s) = delay(obs, &p.geoms[s], &p.atm);
            let r = obs.m_ns[e] - (ds - d0) * 1e9 - (p.offsets[s] - p.offsets[r0]);
            f += smooth_abs(r, eps_ns);
            let psi = smooth_abs_deriv(r, eps_ns);
            // dr/dDs = -1e9, dr/dD0 = +1e9
            let gs = dps * (-1e9 * psi);
            let base = lay.pos(s);
            for c in 0..3 {
                g[base + c] += gs[c];
            }
            gref += dp0 * (1e9 * psi);
            if let Some(i) = lay.off(s) {
                g[i] -= psi;
            }
            if let Some(i) = lay.off(r0) {
                g[i] += psi;
            }
            d_a0 += -1e9 * psi * (da0_s - da0_0);
            d_b += -1e9 * psi * (db_s - db_0);
        }
        let base = lay.pos(r0);
        for c in 0..3 {
            g[base + c] += gref[c];
        }
    }
    g[lay.q()] = d_a0;
    g[lay.w()] = d_b;
    (f, g)
}

fn chain_rule(g: &mut [f64], p: &Params, lay: &Layout, opts: &CoreFitOptions) {
    for s in 0..lay.k {
        let b = lay.pos(s);
        let gp = Vector3::new(g[b], g[b + 1], g[b + 2]);
        let gr = p.geoms[s].jac.transpose() * gp;
        for c in 0..3 {
            g[b + c] = if opts.fit_positions { gr[c] } else { 0.0 };
        }
    }
    if opts.fit_atmosphere {
        g[lay.q()] *= p.da0_dq;
        g[lay.w()] *= p.db_dw;
    } else {
        g[lay.q()] = 0.0;
        g[lay.w()] = 0.0;
    }
}

fn build_observations(set: &MeasurementSet, core: &[SensorId], max_records: usize) -> Vec<Obs> {
    let index: HashMap<SensorId, usize> = core.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut all = Vec::new();
    for rec in set.training_records() {
        let mut rx: Vec<(usize, i64)> = rec
            .receptions
            .iter()
            .filter_map(|r| index.get(&r.sensor_id).map(|i| (*i, r.toa_ns)))
            .collect();
        if rx.len() < 2 {
            continue;
        }
        let truth = rec.truth.expect("training record");
        let Ok(target) = geo::geodetic_to_ecef(&truth) else {
            continue;
        };
        rx.sort_by_key(|r| r.0);
        let t0 = rx[0].1;
        all.push(Obs {
            target: target.to_vector(),
            target_alt: truth.altitude,
            idx: rx.iter().map(|r| r.0).collect(),
            m_ns: rx.iter().map(|r| (r.1 - t0) as f64).collect(),
        });
    }
    if all.len() > max_records && max_records > 0 {
        let stride = all.len() as f64 / max_records as f64;
        let mut kept = Vec::with_capacity(max_records);
        let mut it = all.into_iter().enumerate();
        let mut next = 0.0f64;
        for (i, o) in it.by_ref() {
            if i as f64 >= next {
                kept.push(o);
                next += stride;
            }
        }
        return kept;
    }
    all
}

/// Initial offsets from median pairwise biases, propagated from the
/// reference sensor over the co-reception graph.
fn initial_offsets(obs: &[Obs], geoms: &[SensorGeom], atm: &AtmosphereModel, k: usize, core: &[SensorId]) -> Result<Vec<f64>, SyncError> {
    let mut pairs: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for o in obs {
        let r0 = o.idx[0];
        let d0 = delay(o, &geoms[r0], atm).0;
        for e in 1..o.idx.len() {
            let s = o.idx[e];
            let bias = o.m_ns[e] - (delay(o, &geoms[s], atm).0 - d0) * 1e9;
            pairs.entry((r0, s)).or_default().push(bias);
        }
    }
    let mut adj: Vec<Vec<(usize, f64, usize)>> = vec![Vec::new(); k];
    for ((a, b), v) in &pairs {
        let m = median(v).expect("non-empty");
        adj[*a].push((*b, m, v.len()));
        adj[*b].push((*a, -m, v.len()));
    }
    for list in adj.iter_mut() {
        // strongest links first
        list.sort_by(|x, y| y.2.cmp(&x.2).then(x.0.cmp(&y.0)));
    }
    let mut off = vec![f64::NAN; k];
    off[0] = 0.0;
    let mut queue = VecDeque::from([0usize]);
    while let Some(a) = queue.pop_front() {
        for &(b, m, _) in &adj[a] {
            if off[b].is_nan() {
                off[b] = off[a] + m;
                queue.push_back(b);
            }
        }
    }
    let missing: Vec<SensorId> = (0..k).filter(|i| off[*i].is_nan()).map(|i| core[i]).collect();
    if !missing.is_empty() {
        return Err(SyncError::Disconnected(missing));
    }
    Ok(off)
}

struct CoreProblem<'a> {
    obs: &'a [Obs],
    lay: &'a Layout,
    base: &'a [Vector3<f64>],
    opts: &'a CoreFitOptions,
    exec: Execution,
}

impl CoreProblem<'_> {
    fn eval(&self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        const CHUNK: usize = 256;
        let eps_ns = self.opts.epsilon_s * 1e9;
        let p = unpack(x, self.lay, self.base, self.opts.position_bound_m);
        let chunks: Vec<&[Obs]> = self.obs.chunks(CHUNK).collect();
        let parts = self.exec.map(&chunks, |c| objective(c, &p, self.lay, eps_ns));
        let mut total = 0.0;
        let mut g = vec![0.0; self.lay.n()];
        for (fv, gv) in parts {
            total += fv;
            for (a, b) in g.iter_mut().zip(gv) {
                *a += b;
            }
        }
        chain_rule(&mut g, &p, self.lay, self.opts);
        grad.copy_from_slice(&g);
        total
    }
}

/// Fits positions, offsets and atmosphere of the core sensors.
pub fn fit_core_network(
    set: &MeasurementSet,
    core_ids: &[SensorId],
    noise: &SensorNoiseModel,
    opts: &CoreFitOptions,
    exec: Execution,
) -> Result<CoreFit, SyncError> {
    noise.validate()?;
    let mut core: Vec<SensorId> = core_ids.to_vec();
    core.sort_unstable();
    core.dedup();
    if core.len() < 4 {
        return Err(SyncError::InvalidArgument(format!("{} core sensors given, need at least 4", core.len())));
    }
    let mut base = Vec::with_capacity(core.len());
    for id in &core {
        let s = set
            .sensors
            .get(*id)
            .ok_or_else(|| SyncError::InvalidArgument(format!("core sensor {id} not in the sensor table")))?;
        base.push(s.ecef().to_vector());
    }
    let obs = build_observations(set, &core, opts.max_records);
    if obs.is_empty() {
        return Err(SyncError::InvalidArgument("no training records with two or more core receptions".into()));
    }
    let lay = Layout { k: core.len() };
    let mut x0 = DVector::zeros(lay.n());
    let init_atm = AtmosphereModel::default();
    x0[lay.q()] = (init_atm.a0 / 1e-4).sqrt();
    let sig0 = init_atm.b / B_MAX;
    x0[lay.w()] = (sig0 / (1.0 - sig0)).ln();
    let p0 = unpack(&x0, &lay, &base, opts.position_bound_m);
    let off0 = initial_offsets(&obs, &p0.geoms, &p0.atm, lay.k, &core)?;
    for s in 1..lay.k {
        x0[lay.off(s).unwrap()] = off0[s];
    }

    let problem = CoreProblem {
        obs: &obs,
        lay: &lay,
        base: &base,
        opts,
        exec,
    };
    let f = |x: &DVector<f64>, grad: &mut DVector<f64>| problem.eval(x, grad);
    let bfgs = BfgsOptions {
        max_iterations: opts.max_iterations,
        gradient_tolerance: 1e-6,
        step_tolerance: 1e-7,
        relative_tolerance: 1e-10,
        stall_window: 10,
    };
    let result = optim::minimize(f, x0, &bfgs);
    let p = unpack(&result.x, &lay, &base, opts.position_bound_m);
    let res: Vec<f64> = obs.iter().flat_map(|o| residuals(o, &p)).map(f64::abs).collect();
    let mut sorted = res.clone();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted).unwrap_or(0.0);
    let p90 = sorted.get(((sorted.len() as f64 * 0.9) as usize).min(sorted.len().saturating_sub(1))).copied().unwrap_or(0.0);
    // A failed line search at this point means no further decrease is
    // representable, which is accepted as convergence.
    if !result.value.is_finite() || result.status == BfgsStatus::MaxIterations {
        return Err(SyncError::NotConverged {
            iterations: result.iterations,
            median_ns: med,
            p90_ns: p90,
        });
    }
    if AtmosphereModel::new(p.atm.a0, p.atm.b).is_err() {
        return Err(SyncError::NotConverged {
            iterations: result.iterations,
            median_ns: med,
            p90_ns: p90,
        });
    }
    Ok(CoreFit {
        positions: core.iter().zip(&p.geoms).map(|(id, g)| (*id, EcefPosition::from_vector(&g.pos))).collect(),
        offsets_ns: core.iter().zip(&p.offsets).map(|(id, o)| (*id, *o)).collect(),
        sensor_ids: core,
        atmosphere: p.atm,
        residual_median_ns: med,
        residual_p90_ns: p90,
        n_records: obs.len(),
        n_residuals: res.len(),
        iterations: result.iterations,
    })
}

impl SyncState {
    /// Initial state: core sensors synchronized with their fitted constant
    /// offsets and positions, every other sensor pending.
    pub fn from_core_fit(set: &MeasurementSet, fit: &CoreFit, noise: &SensorNoiseModel) -> Result<Self, SyncError> {
        let epoch_ns = set
            .min_toa_ns()
            .ok_or_else(|| SyncError::InvalidArgument("measurement set has no receptions".into()))?;
        let sensors = set
            .sensors
            .iter()
            .map(|s| {
                let entry = match fit.positions.get(&s.sensor_id) {
                    Some(pos) => SensorSync {
                        status: SensorStatus::CoreSynchronized,
                        clock: ClockModel::constant_ns(fit.offsets_ns[&s.sensor_id]),
                        position: *pos,
                        residual_median_ns: Some(fit.residual_median_ns),
                        samples: 0,
                    },
                    None => SensorSync {
                        status: SensorStatus::Pending,
                        clock: ClockModel::identity(),
                        position: s.ecef(),
                        residual_median_ns: None,
                        samples: 0,
                    },
                };
                (s.sensor_id, entry)
            })
            .collect();
        Ok(SyncState {
            epoch_ns,
            atmosphere: fit.atmosphere,
            noise: noise.clone(),
            sensors,
            rounds: 0,
        })
    }
}
