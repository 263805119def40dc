//! Round-based propagation of the common timebase from synchronized sensors
//! to the rest of the network.
//!
//! For a pending sensor, every training record that it shares with
//! synchronized sensors yields the true arrival time `a` at that sensor
//! (emission time from the synchronized receptions plus the modeled path
//! delay). The clock model `tau = a (1 + f0) + b0 + rw(tau)` is then fitted by
//! iteratively reweighted least squares on the smoothed 1-norm, with a
//! penalized cubic spline for `rw`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ClockModel, RandomWalk, SensorStatus, SyncError, SyncState};
use crate::dataio::{MeasurementSet, SensorId};
use crate::exec::Execution;
use crate::robust::{median, smooth_abs_weight, DEFAULT_EPSILON_S};
use crate::spline::{add_difference_penalty, solve_spd, UniformKnots, UniformSpline};

pub const EXCLUSION_REASON: &str = "large fitting errors";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropagateOptions {
    /// Fewer matched samples than this leaves a sensor pending for the round.
    pub min_samples: usize,
    pub knot_spacing_s: f64,
    pub min_knots: usize,
    /// Activity gaps longer than this split the random-walk spline.
    pub segment_gap_s: f64,
    /// Second-difference penalty weight, relative to the mean data weight per coefficient.
    pub smoothing: f64,
    /// Ridge weight on the spline coefficients, same scaling.
    pub ridge: f64,
    /// Exclusion when the median absolute residual exceeds this many sigma.
    pub exclusion_sigma: f64,
    pub max_rounds: usize,
    pub random_walk: bool,
    pub irls_iterations: usize,
    pub epsilon_s: f64,
}

impl Default for PropagateOptions {
    fn default() -> Self {
        PropagateOptions {
            min_samples: 10,
            knot_spacing_s: 30.0,
            min_knots: 4,
            segment_gap_s: 120.0,
            smoothing: 1.0,
            ridge: 1e-3,
            exclusion_sigma: 5.0,
            max_rounds: 10,
            random_walk: true,
            irls_iterations: 30,
            epsilon_s: DEFAULT_EPSILON_S,
        }
    }
}

/// Outcome of one sensor fit.
#[derive(Debug, Clone, PartialEq)]
pub enum SensorFit {
    Synchronized { clock: ClockModel, median_ns: f64, samples: usize },
    Excluded { reason: String, median_ns: f64, samples: usize },
    Insufficient { samples: usize },
}

/// Index of record positions by sensor.
pub struct SensorIndex {
    training: HashMap<SensorId, Vec<usize>>,
    activity_ns: HashMap<SensorId, Vec<i64>>,
}

impl SensorIndex {
    pub fn new(set: &MeasurementSet) -> Self {
        let mut training: HashMap<SensorId, Vec<usize>> = HashMap::new();
        let mut activity_ns: HashMap<SensorId, Vec<i64>> = HashMap::new();
        for (i, rec) in set.records.iter().enumerate() {
            for r in &rec.receptions {
                activity_ns.entry(r.sensor_id).or_default().push(r.toa_ns);
                if rec.truth.is_some() {
                    training.entry(r.sensor_id).or_default().push(i);
                }
            }
        }
        for v in activity_ns.values_mut() {
            v.sort_unstable();
        }
        SensorIndex { training, activity_ns }
    }
}

/// Matched samples of a pending sensor: raw timestamp and true arrival time
/// (seconds from the epoch).
fn collect_samples(set: &MeasurementSet, idx: &SensorIndex, sensor: SensorId, state: &SyncState) -> Vec<(i64, f64)> {
    let Some(records) = idx.training.get(&sensor) else {
        return Vec::new();
    };
    let own = &state.sensors[&sensor];
    let mut out = Vec::with_capacity(records.len());
    let mut emissions = Vec::new();
    for &ri in records {
        let rec = &set.records[ri];
        let truth = rec.truth.expect("training record");
        let Ok(target) = truth.to_ecef() else {
            continue;
        };
        emissions.clear();
        let mut own_toa = None;
        for r in &rec.receptions {
            if r.sensor_id == sensor {
                own_toa = Some(r.toa_ns);
                continue;
            }
            let Some(s) = state.sensors.get(&r.sensor_id) else {
                continue;
            };
            if !s.status.is_synchronized() {
                continue;
            }
            let Ok(t) = s.clock.correct(r.toa_ns, state.epoch_ns) else {
                continue;
            };
            let h = crate::geo::ecef_to_geodetic_raw(&s.position).2;
            emissions.push(t - state.atmosphere.propagation_time(target.distance(&s.position), h, truth.altitude));
        }
        let (Some(toa), Some(emit)) = (own_toa, median(&emissions)) else {
            continue;
        };
        let h = crate::geo::ecef_to_geodetic_raw(&own.position).2;
        let arrival = emit + state.atmosphere.propagation_time(target.distance(&own.position), h, truth.altitude);
        out.push((toa, arrival));
    }
    out
}

/// Contiguous activity segments (local seconds) split at long gaps.
fn activity_segments(times_ns: &[i64], epoch_ns: i64, coarse: i64, gap_s: f64) -> Vec<(f64, f64)> {
    let mut segs: Vec<(f64, f64)> = Vec::new();
    for &t in times_ns {
        let tau = (t - epoch_ns - coarse) as f64 * 1e-9;
        match segs.last_mut() {
            Some(last) if tau - last.1 <= gap_s => last.1 = tau,
            _ => segs.push((tau, tau)),
        }
    }
    segs
}

/// Fits the clock of one sensor against the synchronized part of `state`.
pub fn fit_sensor_clock(
    set: &MeasurementSet,
    idx: &SensorIndex,
    sensor: SensorId,
    state: &SyncState,
    opts: &PropagateOptions,
) -> SensorFit {
    let samples = collect_samples(set, idx, sensor, state);
    let n = samples.len();
    if n < opts.min_samples.max(3) {
        return SensorFit::Insufficient { samples: n };
    }
    let epoch = state.epoch_ns;
    // integer part of the offset
    let raw: Vec<f64> = samples.iter().map(|(toa, a)| (toa - epoch) as f64 - a * 1e9).collect();
    let coarse = median(&raw).expect("non-empty").round() as i64;

    let a: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let tau: Vec<f64> = samples.iter().map(|(toa, _)| (toa - epoch - coarse) as f64 * 1e-9).collect();
    // y = (tau - a) in ns, exact integer part first
    let y: Vec<f64> = samples
        .iter()
        .map(|(toa, a)| (toa - epoch - coarse) as f64 - a * 1e9)
        .collect();
    let a_lo = a.iter().copied().fold(f64::INFINITY, f64::min);
    let a_hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let a_mid = 0.5 * (a_lo + a_hi);
    let half = (0.5 * (a_hi - a_lo)).max(1.0);

    let mut segments: Vec<(usize, UniformKnots)> = Vec::new();
    let mut ncols = 2;
    if opts.random_walk {
        let times = idx.activity_ns.get(&sensor).map(Vec::as_slice).unwrap_or(&[]);
        for (lo, hi) in activity_segments(times, epoch, coarse, opts.segment_gap_s) {
            let knots = UniformKnots::covering(3, lo, hi, opts.knot_spacing_s, opts.min_knots).expect("valid knot layout");
            segments.push((ncols, knots));
            ncols += knots.n_coeffs();
        }
    }
    // design rows: (col, value) pairs
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let mut row = vec![(0, 1.0), (1, (a[i] - a_mid) / half)];
            if let Some((off, k)) = segments.iter().find(|(_, k)| k.contains(tau[i])) {
                if let Ok((first, b)) = k.basis(tau[i]) {
                    for (j, v) in b.iter().take(k.degree + 1).enumerate() {
                        row.push((off + first + j, *v));
                    }
                }
            }
            row
        })
        .collect();
    let rw_cols = ncols - 2;
    let eps_ns = opts.epsilon_s * 1e9;
    let mut w = vec![1.0; n];
    let mut beta = DVector::<f64>::zeros(ncols);
    for it in 0..opts.irls_iterations.max(1) {
        let mut ata = DMatrix::<f64>::zeros(ncols, ncols);
        let mut aty = DVector::<f64>::zeros(ncols);
        for (i, row) in rows.iter().enumerate() {
            for &(c1, v1) in row {
                aty[c1] += w[i] * v1 * y[i];
                for &(c2, v2) in row {
                    ata[(c1, c2)] += w[i] * v1 * v2;
                }
            }
        }
        if rw_cols > 0 {
            let scale = w.iter().sum::<f64>() / rw_cols as f64;
            for (off, k) in &segments {
                add_difference_penalty(&mut ata, *off, k.n_coeffs(), 2, opts.smoothing * scale);
                add_difference_penalty(&mut ata, *off, k.n_coeffs(), 0, opts.ridge * scale);
            }
        }
        let Some(next) = solve_spd(ata, aty) else {
            return SensorFit::Excluded {
                reason: "singular clock fit".into(),
                median_ns: f64::NAN,
                samples: n,
            };
        };
        let change = (&next - &beta).amax();
        beta = next;
        for (i, row) in rows.iter().enumerate() {
            let fit: f64 = row.iter().map(|&(c, v)| v * beta[c]).sum();
            w[i] = smooth_abs_weight(y[i] - fit, eps_ns);
        }
        if it > 0 && change < 1e-3 {
            break;
        }
    }
    let abs_res: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, row)| (y[i] - row.iter().map(|&(c, v)| v * beta[c]).sum::<f64>()).abs())
        .collect();
    let med = median(&abs_res).unwrap_or(0.0);
    let sigma = state.noise.sigma_for(sensor);
    if !(med <= opts.exclusion_sigma * sigma) {
        return SensorFit::Excluded {
            reason: EXCLUSION_REASON.into(),
            median_ns: med,
            samples: n,
        };
    }
    let f0 = beta[1] / (half * 1e9);
    let b0 = (beta[0] - f0 * a_mid * 1e9) * 1e-9;
    let rw = (rw_cols > 0).then(|| RandomWalk {
        segments: segments
            .iter()
            .map(|(off, k)| {
                let coeffs = (0..k.n_coeffs()).map(|j| beta[off + j] * 1e-9).collect();
                UniformSpline::new(*k, coeffs).expect("coefficient count matches")
            })
            .collect(),
    });
    let clock = ClockModel {
        coarse_offset_ns: coarse,
        b0,
        f0,
        d: 0.0,
        rw,
    };
    if clock.validate().is_err() {
        return SensorFit::Excluded {
            reason: EXCLUSION_REASON.into(),
            median_ns: med,
            samples: n,
        };
    }
    SensorFit::Synchronized {
        clock,
        median_ns: med,
        samples: n,
    }
}

/// Summary of one propagation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: usize,
    pub synchronized: Vec<SensorId>,
    pub excluded: Vec<SensorId>,
    pub still_pending: usize,
}

/// Synchronizes pending sensors round by round until nothing changes.
///
/// Each round fits every pending sensor against the state at the start of the
/// round, so the result does not depend on evaluation order or thread count.
pub fn propagate_network_sync(
    set: &MeasurementSet,
    state: &SyncState,
    opts: &PropagateOptions,
    exec: Execution,
) -> Result<(SyncState, Vec<RoundSummary>), SyncError> {
    state.validate()?;
    let synced = state.synchronized_ids().len();
    if synced < 4 {
        return Err(SyncError::InvalidArgument(format!("{synced} synchronized sensors, need at least 4")));
    }
    let idx = SensorIndex::new(set);
    let mut current = state.clone();
    let mut summaries = Vec::new();
    for round in 1..=opts.max_rounds.max(1) {
        let pending: Vec<SensorId> = current.ids_with(|s| *s == SensorStatus::Pending);
        if pending.is_empty() {
            break;
        }
        let snapshot = &current;
        let fits = exec.map(&pending, |id| fit_sensor_clock(set, &idx, *id, snapshot, opts));
        let mut next = current.clone();
        let mut summary = RoundSummary {
            round,
            synchronized: Vec::new(),
            excluded: Vec::new(),
            still_pending: 0,
        };
        for (id, fit) in pending.iter().zip(fits) {
            let entry = next.sensors.get_mut(id).expect("pending id from state");
            match fit {
                SensorFit::Synchronized { clock, median_ns, samples } => {
                    entry.status = SensorStatus::DriftSynchronized;
                    entry.clock = clock;
                    entry.residual_median_ns = Some(median_ns);
                    entry.samples = samples;
                    summary.synchronized.push(*id);
                }
                SensorFit::Excluded { reason, median_ns, samples } => {
                    entry.status = SensorStatus::Excluded { reason };
                    entry.residual_median_ns = median_ns.is_finite().then_some(median_ns);
                    entry.samples = samples;
                    summary.excluded.push(*id);
                }
                SensorFit::Insufficient { samples } => {
                    entry.samples = samples;
                    summary.still_pending += 1;
                }
            }
        }
        let progressed = !summary.synchronized.is_empty() || !summary.excluded.is_empty();
        next.rounds = state.rounds + round;
        current = next;
        log::info!(
            "sync round {round}: {} synchronized, {} excluded, {} pending",
            summary.synchronized.len(),
            summary.excluded.len(),
            summary.still_pending
        );
        summaries.push(summary);
        if !progressed {
            if round == 1 {
                return Err(SyncError::NoProgress(pending));
            }
            break;
        }
    }
    Ok((current, summaries))
}

/// Residuals (ns) of corrected arrival times against the arrival times
/// implied by known positions and the synchronized network, per sensor.
pub fn sync_residuals(set: &MeasurementSet, state: &SyncState) -> BTreeMap<SensorId, Vec<f64>> {
    let mut out: BTreeMap<SensorId, Vec<f64>> = BTreeMap::new();
    let mut emissions = Vec::new();
    for rec in set.training_records() {
        let truth = rec.truth.expect("training record");
        let Ok(target) = truth.to_ecef() else {
            continue;
        };
        emissions.clear();
        let mut per_sensor = Vec::new();
        for r in &rec.receptions {
            let Some(s) = state.sensors.get(&r.sensor_id) else {
                continue;
            };
            if !s.status.is_synchronized() {
                continue;
            }
            let Ok(t) = s.clock.correct(r.toa_ns, state.epoch_ns) else {
                continue;
            };
            let h = crate::geo::ecef_to_geodetic_raw(&s.position).2;
            let e = t - state.atmosphere.propagation_time(target.distance(&s.position), h, truth.altitude);
            emissions.push(e);
            per_sensor.push((r.sensor_id, e));
        }
        if per_sensor.len() < 3 {
            continue;
        }
        let m = median(&emissions).expect("non-empty");
        for (id, e) in per_sensor {
            out.entry(id).or_default().push((e - m) * 1e9);
        }
    }
    out
}
