use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SyncError;
use crate::atmosphere::AtmosphereModel;
use crate::dataio::{self, DataError, MeasurementRecord, SensorId};
use crate::geo::EcefPosition;
use crate::spline::UniformSpline;

/// Timing noise of the receivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorNoiseModel {
    /// Default standard deviation in nanoseconds.
    pub sigma_ns: f64,
    /// Per-sensor overrides (the diagonal of the noise covariance).
    pub per_sensor_ns: BTreeMap<SensorId, f64>,
}

impl Default for SensorNoiseModel {
    fn default() -> Self {
        SensorNoiseModel {
            sigma_ns: 20.0,
            per_sensor_ns: BTreeMap::new(),
        }
    }
}

impl SensorNoiseModel {
    pub fn new(sigma_ns: f64) -> Result<Self, SyncError> {
        let m = SensorNoiseModel {
            sigma_ns,
            per_sensor_ns: BTreeMap::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), SyncError> {
        let ok = |s: f64| s.is_finite() && s > 0.0;
        if !ok(self.sigma_ns) || !self.per_sensor_ns.values().all(|s| ok(*s)) {
            return Err(SyncError::InvalidArgument("noise sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn sigma_for(&self, id: SensorId) -> f64 {
        self.per_sensor_ns.get(&id).copied().unwrap_or(self.sigma_ns)
    }
}

/// Piecewise cubic spline in seconds over local clock time, one piece per
/// contiguous activity segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomWalk {
    pub segments: Vec<UniformSpline>,
}

impl RandomWalk {
    pub fn eval(&self, t: f64) -> Result<f64, SyncError> {
        for s in &self.segments {
            if s.knots.contains(t) {
                return s.eval(t).map_err(|e| SyncError::OutOfSpan(e.to_string()));
            }
        }
        Err(SyncError::OutOfSpan(format!("local time {t:.3} s is outside every random-walk segment")))
    }

    fn validate(&self) -> Result<(), SyncError> {
        for w in self.segments.windows(2) {
            if w[1].knots.start < w[0].knots.end() {
                return Err(SyncError::InvalidArgument("random-walk segments overlap or are unordered".into()));
            }
        }
        Ok(())
    }
}

/// Receiver clock: local time `tau = a (1 + f0) + b0 + rw(tau) + d tau^2 / 2`
/// where `a` is the true arrival time. Local time is measured in seconds
/// from the network epoch after removing the integer `coarse_offset_ns`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub coarse_offset_ns: i64,
    pub b0: f64,
    pub f0: f64,
    #[serde(default)]
    pub d: f64,
    #[serde(default)]
    pub rw: Option<RandomWalk>,
}

impl Default for ClockModel {
    fn default() -> Self {
        ClockModel::identity()
    }
}

impl ClockModel {
    pub fn identity() -> Self {
        ClockModel {
            coarse_offset_ns: 0,
            b0: 0.0,
            f0: 0.0,
            d: 0.0,
            rw: None,
        }
    }

    /// Constant offset expressed in nanoseconds.
    pub fn constant_ns(offset_ns: f64) -> Self {
        let coarse = offset_ns.round();
        ClockModel {
            coarse_offset_ns: coarse as i64,
            b0: (offset_ns - coarse) * 1e-9,
            ..ClockModel::identity()
        }
    }

    pub fn validate(&self) -> Result<(), SyncError> {
        if !(self.f0.is_finite() && self.f0.abs() < 1e-3) {
            return Err(SyncError::InvalidArgument(format!("frequency offset {} out of range", self.f0)));
        }
        if !(self.b0.is_finite() && self.d.is_finite()) {
            return Err(SyncError::InvalidArgument("non-finite clock parameter".into()));
        }
        if let Some(rw) = &self.rw {
            rw.validate()?;
        }
        Ok(())
    }

    /// Local clock time in seconds for a raw timestamp.
    pub fn local_time(&self, toa_ns: i64, epoch_ns: i64) -> f64 {
        (toa_ns - epoch_ns - self.coarse_offset_ns) as f64 * 1e-9
    }

    /// Arrival time on the common timebase, seconds from the epoch.
    pub fn correct(&self, toa_ns: i64, epoch_ns: i64) -> Result<f64, SyncError> {
        let tau = self.local_time(toa_ns, epoch_ns);
        let rw = match &self.rw {
            Some(rw) => rw.eval(tau)?,
            None => 0.0,
        };
        Ok((tau - self.b0 - rw - 0.5 * self.d * tau * tau) / (1.0 + self.f0))
    }

    /// Raw timestamp (ns, fractional) that this clock would report for a
    /// true arrival at `a` seconds from the epoch. Only exact without `rw`.
    pub fn apply_without_rw(&self, a: f64, epoch_ns: i64) -> f64 {
        let tau = a * (1.0 + self.f0) + self.b0;
        (epoch_ns + self.coarse_offset_ns) as f64 + tau * 1e9
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum SensorStatus {
    CoreSynchronized,
    DriftSynchronized,
    Excluded { reason: String },
    Pending,
}

impl SensorStatus {
    pub fn is_synchronized(&self) -> bool {
        matches!(self, SensorStatus::CoreSynchronized | SensorStatus::DriftSynchronized)
    }

    pub fn is_settled(&self) -> bool {
        !matches!(self, SensorStatus::Pending)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSync {
    #[serde(flatten)]
    pub status: SensorStatus,
    pub clock: ClockModel,
    pub position: EcefPosition,
    /// Median absolute fit residual in ns, when a fit was made.
    #[serde(default)]
    pub residual_median_ns: Option<f64>,
    #[serde(default)]
    pub samples: usize,
}

/// Synchronization result shared between the sync and localize stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncState {
    /// Integer origin of the common timebase.
    pub epoch_ns: i64,
    pub atmosphere: AtmosphereModel,
    pub noise: SensorNoiseModel,
    pub sensors: BTreeMap<SensorId, SensorSync>,
    #[serde(default)]
    pub rounds: usize,
}

impl SyncState {
    pub fn synchronized_ids(&self) -> Vec<SensorId> {
        self.sensors.iter().filter(|(_, s)| s.status.is_synchronized()).map(|(id, _)| *id).collect()
    }

    pub fn ids_with<F: Fn(&SensorStatus) -> bool>(&self, pred: F) -> Vec<SensorId> {
        self.sensors.iter().filter(|(_, s)| pred(&s.status)).map(|(id, _)| *id).collect()
    }

    pub fn is_synchronized(&self, id: SensorId) -> bool {
        self.sensors.get(&id).is_some_and(|s| s.status.is_synchronized())
    }

    pub fn validate(&self) -> Result<(), SyncError> {
        self.noise.validate()?;
        for (id, s) in &self.sensors {
            s.clock.validate()?;
            if s.status == SensorStatus::CoreSynchronized && (s.clock.rw.is_some() || s.clock.d != 0.0) {
                return Err(SyncError::InvalidArgument(format!("core sensor {id} carries a drift model")));
            }
            if let SensorStatus::Excluded { reason } = &s.status {
                if reason.is_empty() {
                    return Err(SyncError::InvalidArgument(format!("sensor {id} excluded without a reason")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sync state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SyncError> {
        let s: SyncState = serde_json::from_str(text).map_err(|e| SyncError::InvalidArgument(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let body = self.to_json();
        dataio::atomic_write(path.as_ref(), |w| w.write_all(body.as_bytes()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SyncError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| SyncError::InvalidArgument(format!("{}: {e}", path.display())))?;
        SyncState::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OmitReason {
    NotSynchronized,
    UnknownSensor,
    OutsideClockSpan(String),
}

/// Receptions of one record mapped to the common timebase.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrectedRecord {
    /// `(sensor, arrival seconds from the epoch)`, in reception order.
    pub toas: Vec<(SensorId, f64)>,
    pub omitted: Vec<(SensorId, OmitReason)>,
}

/// Applies each sensor's clock correction; receptions of sensors that are
/// not synchronized are omitted and reported.
pub fn correct_timestamps(record: &MeasurementRecord, state: &SyncState) -> CorrectedRecord {
    let mut out = CorrectedRecord::default();
    for r in &record.receptions {
        match state.sensors.get(&r.sensor_id) {
            None => out.omitted.push((r.sensor_id, OmitReason::UnknownSensor)),
            Some(s) if !s.status.is_synchronized() => out.omitted.push((r.sensor_id, OmitReason::NotSynchronized)),
            Some(s) => match s.clock.correct(r.toa_ns, state.epoch_ns) {
                Ok(t) => out.toas.push((r.sensor_id, t)),
                Err(e) => out.omitted.push((r.sensor_id, OmitReason::OutsideClockSpan(e.to_string()))),
            },
        }
    }
    out
}
