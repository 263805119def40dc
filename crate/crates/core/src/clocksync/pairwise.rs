use serde::{Deserialize, Serialize};

use super::{ClockModel, SyncError};
use crate::atmosphere::{AtmosphereModel, SPEED_OF_LIGHT};
use crate::dataio::{MeasurementSet, SensorId};
use crate::geo;

/// Observed clock bias of sensor `i` relative to `j` on every common record
/// with a known aircraft position: `(server_time, bias seconds)`, time ordered.
pub fn pairwise_offset_series(
    set: &MeasurementSet,
    i: SensorId,
    j: SensorId,
    atmosphere: &AtmosphereModel,
) -> Result<Vec<(f64, f64)>, SyncError> {
    if i == j {
        return Err(SyncError::InvalidArgument(format!("sensor {i} paired with itself")));
    }
    let lookup = |id: SensorId| {
        set.sensors
            .get(id)
            .map(|s| (s.ecef(), s.position.altitude))
            .ok_or_else(|| SyncError::InvalidArgument(format!("unknown sensor {id}")))
    };
    let (pi, hi) = lookup(i)?;
    let (pj, hj) = lookup(j)?;
    let mut out = Vec::new();
    for rec in set.training_records() {
        let (Some(ri), Some(rj)) = (rec.reception(i), rec.reception(j)) else {
            continue;
        };
        let truth = rec.truth.expect("training records carry truth");
        let Ok(target) = geo::geodetic_to_ecef(&truth) else {
            continue;
        };
        let di = target.distance(&pi) * atmosphere.mean_index(hi, truth.altitude);
        let dj = target.distance(&pj) * atmosphere.mean_index(hj, truth.altitude);
        let measured = (ri.toa_ns - rj.toa_ns) as f64 * 1e-9;
        out.push((rec.server_time, measured - (di - dj) / SPEED_OF_LIGHT));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlphaBetaParams {
    pub alpha: f64,
    pub beta: f64,
    /// Innovations above `outlier_k` times the running innovation scale are dropped.
    pub outlier_k: f64,
    /// The filter restarts after a gap longer than this (seconds).
    pub restart_gap_s: f64,
    /// Samples accepted unconditionally after a (re)start.
    pub warmup: usize,
    /// Consecutive drops that force a restart (a genuine clock step).
    pub max_consecutive_drops: usize,
    /// Lower bound of the innovation scale, seconds.
    pub scale_floor_s: f64,
}

impl Default for AlphaBetaParams {
    fn default() -> Self {
        AlphaBetaParams {
            alpha: 0.1,
            beta: 0.01,
            outlier_k: 6.0,
            restart_gap_s: 60.0,
            warmup: 10,
            max_consecutive_drops: 5,
            scale_floor_s: 1e-9,
        }
    }
}

/// Output of [`alpha_beta_track`].
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBetaTrack {
    /// Clock estimate after each accepted sample, as `(time, model)` with the
    /// model's offset referenced to time zero of the series clock.
    pub models: Vec<(f64, ClockModel)>,
    /// Indices of dropped samples.
    pub dropped: Vec<usize>,
    /// Indices at which the filter (re)started.
    pub restarts: Vec<usize>,
}

impl AlphaBetaTrack {
    pub fn last(&self) -> Option<&ClockModel> {
        self.models.last().map(|(_, m)| m)
    }

    /// Offset estimate (seconds) at the time of the last accepted sample.
    pub fn final_offset(&self) -> Option<f64> {
        self.models.last().map(|(t, m)| m.b0 + m.f0 * t)
    }
}

/// Sequential offset/drift tracking of a bias series with outlier rejection.
pub fn alpha_beta_track(series: &[(f64, f64)], params: &AlphaBetaParams) -> Result<AlphaBetaTrack, SyncError> {
    if series.is_empty() {
        return Err(SyncError::InvalidArgument("empty bias series".into()));
    }
    let gain_ok = |g: f64| g > 0.0 && g < 1.0;
    if !gain_ok(params.alpha) || !gain_ok(params.beta) || !(params.outlier_k > 0.0) {
        return Err(SyncError::InvalidArgument("gains must lie in (0, 1) and outlier_k > 0".into()));
    }
    let mut out = AlphaBetaTrack {
        models: Vec::with_capacity(series.len()),
        dropped: Vec::new(),
        restarts: Vec::new(),
    };
    let mut x = 0.0;
    let mut v = 0.0;
    let mut t_last = f64::NEG_INFINITY;
    let mut accepted = 0usize;
    let mut scale = params.scale_floor_s;
    let mut drops_in_row = 0usize;
    let record = |out: &mut AlphaBetaTrack, t: f64, x: f64, v: f64| {
        let m = ClockModel {
            b0: x - v * t,
            f0: v,
            ..ClockModel::identity()
        };
        out.models.push((t, m));
    };
    for (k, &(t, z)) in series.iter().enumerate() {
        let gap = t - t_last;
        if accepted == 0 || gap > params.restart_gap_s || drops_in_row >= params.max_consecutive_drops {
            x = z;
            v = 0.0;
            t_last = t;
            accepted = 1;
            scale = params.scale_floor_s;
            drops_in_row = 0;
            out.restarts.push(k);
            record(&mut out, t, x, v);
            continue;
        }
        let dt = gap.max(1e-6);
        if accepted == 1 {
            // two-point initialization of the drift
            v = (z - x) / dt;
            x = z;
            t_last = t;
            accepted = 2;
            record(&mut out, t, x, v);
            continue;
        }
        let predicted = x + v * dt;
        let innovation = z - predicted;
        if accepted >= params.warmup && innovation.abs() > params.outlier_k * scale {
            out.dropped.push(k);
            drops_in_row += 1;
            continue;
        }
        drops_in_row = 0;
        x = predicted + params.alpha * innovation;
        v += params.beta / dt * innovation;
        scale = (0.9 * scale + 0.1 * innovation.abs()).max(params.scale_floor_s);
        t_last = t;
        accepted += 1;
        record(&mut out, t, x, v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_offset_is_tracked_exactly() {
        let series: Vec<(f64, f64)> = (0..50).map(|k| (k as f64, 1e-6)).collect();
        let tr = alpha_beta_track(&series, &AlphaBetaParams::default()).unwrap();
        assert!((tr.final_offset().unwrap() - 1e-6).abs() < 1e-15);
        assert!(tr.last().unwrap().f0.abs() < 1e-15);
        assert!(tr.dropped.is_empty());
    }

    #[test]
    fn spike_is_dropped() {
        let mut series: Vec<(f64, f64)> = (0..60).map(|k| (k as f64, 1e-6 + 2e-9 * ((k * 7 % 5) as f64 - 2.0))).collect();
        series[30].1 = 10e-6;
        let tr = alpha_beta_track(&series, &AlphaBetaParams::default()).unwrap();
        assert_eq!(tr.dropped, vec![30]);
        assert!((tr.final_offset().unwrap() - 1e-6).abs() < 5e-9);
    }

    #[test]
    fn gap_restarts_filter() {
        let mut series: Vec<(f64, f64)> = (0..20).map(|k| (k as f64, 1e-6)).collect();
        series.extend((0..20).map(|k| (200.0 + k as f64, 3e-6)));
        let tr = alpha_beta_track(&series, &AlphaBetaParams::default()).unwrap();
        assert_eq!(tr.restarts, vec![0, 20]);
        assert!((tr.final_offset().unwrap() - 3e-6).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(alpha_beta_track(&[], &AlphaBetaParams::default()).is_err());
        let p = AlphaBetaParams {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(alpha_beta_track(&[(0.0, 0.0)], &p).is_err());
    }
}
