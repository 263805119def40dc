//! Truncated RMSE, coverage and the public/full split used to rank predictions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{choose_flights, AircraftId, MeasurementSet, RecordId};
use crate::geo::{ground_distance, GeodeticPosition};

/// Informational award bars, in meters.
pub const AWARD_THRESHOLDS_M: [f64; 2] = [1000.0, 5000.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("integrity error: {0}")]
    Integrity(String),
}

/// Predicted (or withheld true) positions keyed by record id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    entries: BTreeMap<RecordId, GeodeticPosition>,
}

impl PredictionSet {
    pub fn insert(&mut self, id: RecordId, p: GeodeticPosition) -> Option<GeodeticPosition> {
        self.entries.insert(id, p)
    }

    pub fn get(&self, id: RecordId) -> Option<&GeodeticPosition> {
        self.entries.get(&id)
    }

    pub fn remove(&mut self, id: RecordId) -> Option<GeodeticPosition> {
        self.entries.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = RecordId> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (RecordId, &GeodeticPosition)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }
}

impl FromIterator<(RecordId, GeodeticPosition)> for PredictionSet {
    fn from_iter<I: IntoIterator<Item = (RecordId, GeodeticPosition)>>(iter: I) -> Self {
        PredictionSet {
            entries: iter.into_iter().collect(),
        }
    }
}

/// RMSE of the `floor(truncation * N)` smallest errors (at least one).
pub fn truncated_rmse(errors: &[f64], truncation: f64) -> Result<f64, ScoringError> {
    if errors.is_empty() {
        return Err(ScoringError::InvalidArgument("no errors to aggregate".into()));
    }
    if !(truncation > 0.0 && truncation <= 1.0) {
        return Err(ScoringError::InvalidArgument(format!("truncation {truncation} outside (0, 1]")));
    }
    if errors.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(ScoringError::InvalidArgument("errors must be finite and non-negative".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let keep = ((truncation * sorted.len() as f64).floor() as usize).max(1);
    let mean_sq = sorted[..keep].iter().map(|e| e * e).sum::<f64>() / keep as f64;
    Ok(mean_sq.sqrt())
}

/// Fraction of maskable records of `masked` that carry a prediction.
pub fn coverage(preds: &PredictionSet, masked: &MeasurementSet) -> f64 {
    let mut total = 0usize;
    let mut hit = 0usize;
    for r in masked.maskable_records() {
        total += 1;
        if preds.get(r.record_id).is_some_and(is_finite) {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

fn is_finite(p: &GeodeticPosition) -> bool {
    p.latitude.is_finite() && p.longitude.is_finite() && p.altitude.is_finite()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Public,
    #[default]
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ErrorMetric {
    /// Horizontal distance on the ellipsoid; altitude ignored.
    #[default]
    #[serde(rename = "2d")]
    Ground2d,
    /// Straight-line distance between ECEF positions.
    #[serde(rename = "3d")]
    Euclidean3d,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub truncation: f64,
    pub min_coverage: f64,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub split: Split,
    pub metric: ErrorMetric,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            truncation: 0.9,
            min_coverage: 0.7,
            split_fraction: 0.3,
            split_seed: 0,
            split: Split::Full,
            metric: ErrorMetric::Ground2d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub trmse_m: f64,
    pub coverage: f64,
    pub n_scored: usize,
    pub truncation: f64,
    pub split: Split,
    pub pass_coverage: bool,
}

impl ScoreReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "split: {:?}\ntrmse: {:.2} m (truncation {})\ncoverage: {:.4} ({} scored) -> {}\n",
            self.split,
            self.trmse_m,
            self.truncation,
            self.coverage,
            self.n_scored,
            if self.pass_coverage { "pass" } else { "FAIL" },
        );
        for t in AWARD_THRESHOLDS_M {
            s.push_str(&format!(
                "below {t:.0} m: {}\n",
                if self.pass_coverage && self.trmse_m < t { "yes" } else { "no" }
            ));
        }
        s
    }
}

/// Error between a prediction and the truth under the chosen metric.
pub fn position_error(pred: &GeodeticPosition, truth: &GeodeticPosition, metric: ErrorMetric) -> f64 {
    match metric {
        ErrorMetric::Ground2d => ground_distance(pred, truth),
        ErrorMetric::Euclidean3d => {
            let a = crate::geo::geodetic_to_ecef_unchecked(pred.latitude, pred.longitude, pred.altitude);
            let b = crate::geo::geodetic_to_ecef_unchecked(truth.latitude, truth.longitude, truth.altitude);
            a.distance(&b)
        }
    }
}

/// Flights in the public split: a fixed, seed-determined subset.
pub fn public_flights(flights: &BTreeSet<AircraftId>, fraction: f64, seed: u64) -> BTreeSet<AircraftId> {
    let all: Vec<AircraftId> = flights.iter().copied().collect();
    let k = (fraction * all.len() as f64).round() as usize;
    choose_flights(&all, k.max(1).min(all.len()), seed)
}

/// Scores predictions against withheld truth over the maskable records of `masked`.
pub fn evaluate(
    preds: &PredictionSet,
    truth: &PredictionSet,
    masked: &MeasurementSet,
    config: &ScoreConfig,
) -> Result<ScoreReport, ScoringError> {
    if !(config.min_coverage > 0.0 && config.min_coverage <= 1.0) {
        return Err(ScoringError::InvalidArgument("min_coverage outside (0, 1]".into()));
    }
    let maskable: BTreeMap<RecordId, AircraftId> =
        masked.maskable_records().map(|r| (r.record_id, r.aircraft_id)).collect();
    if let Some(bad) = preds.ids().find(|id| !maskable.contains_key(id)) {
        return Err(ScoringError::Integrity(format!("prediction for unmasked record {bad}")));
    }
    if let Some(missing) = maskable.keys().find(|id| truth.get(**id).is_none()) {
        return Err(ScoringError::Integrity(format!("no truth for masked record {missing}")));
    }
    let included: Box<dyn Fn(AircraftId) -> bool> = match config.split {
        Split::Full => Box::new(|_| true),
        Split::Public => {
            let flights: BTreeSet<AircraftId> = maskable.values().copied().collect();
            let public = public_flights(&flights, config.split_fraction, config.split_seed);
            Box::new(move |a| public.contains(&a))
        }
    };
    let mut total = 0usize;
    let mut errors = Vec::new();
    for (id, aircraft) in &maskable {
        if !included(*aircraft) {
            continue;
        }
        total += 1;
        if let Some(p) = preds.get(*id).filter(|p| is_finite(p)) {
            let t = truth.get(*id).expect("checked above");
            errors.push(position_error(p, t, config.metric));
        }
    }
    if errors.is_empty() {
        return Err(ScoringError::InvalidArgument("no predictions to score".into()));
    }
    let coverage = errors.len() as f64 / total as f64;
    Ok(ScoreReport {
        trmse_m: truncated_rmse(&errors, config.truncation)?,
        coverage,
        n_scored: errors.len(),
        truncation: config.truncation,
        split: config.split,
        pass_coverage: coverage >= config.min_coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{MeasurementRecord, Reception, Sensor, SensorTable};

    #[test]
    fn trmse_hand_cases() {
        assert_eq!(truncated_rmse(&[0.0; 5], 0.9).unwrap(), 0.0);
        let e: Vec<f64> = (1..=10).map(f64::from).collect();
        let expect = (285.0f64 / 9.0).sqrt();
        assert!((truncated_rmse(&e, 0.9).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 5.627).abs() < 1e-3);
        assert_eq!(truncated_rmse(&[7.5], 0.1).unwrap(), 7.5);
        assert!(truncated_rmse(&[], 0.9).is_err());
        assert!(truncated_rmse(&[1.0], 0.0).is_err());
    }

    fn masked_set(n: u64) -> MeasurementSet {
        let sensors: SensorTable =
            std::iter::once(Sensor::new(1, GeodeticPosition::new(0.0, 0.0, 0.0).unwrap(), "gps")).collect();
        let records = (0..n)
            .map(|i| MeasurementRecord {
                record_id: i,
                aircraft_id: i % 10,
                server_time: i as f64,
                truth: None,
                baro_altitude: None,
                receptions: vec![Reception { sensor_id: 1, toa_ns: 0, rssi: 0.0 }],
            })
            .collect();
        MeasurementSet::new(records, sensors).unwrap()
    }

    #[test]
    fn coverage_arithmetic() {
        let set = masked_set(100);
        let p = GeodeticPosition::new(1.0, 1.0, 1.0).unwrap();
        let all: PredictionSet = (0..100).map(|i| (i, p)).collect();
        assert_eq!(coverage(&all, &set), 1.0);
        assert_eq!(coverage(&PredictionSet::default(), &set), 0.0);
        let some: PredictionSet = (0..70).map(|i| (i, p)).collect();
        assert_eq!(coverage(&some, &set), 0.7);
        let r = evaluate(&some, &all, &set, &ScoreConfig::default()).unwrap();
        assert!(r.pass_coverage);
        assert_eq!(r.trmse_m, 0.0);
        assert_eq!(r.n_scored, 70);
    }

    #[test]
    fn perfect_predictions_and_integrity() {
        let set = masked_set(20);
        let truth: PredictionSet = (0..20)
            .map(|i| (i, GeodeticPosition::new(10.0 + i as f64 * 1e-3, 5.0, 1000.0).unwrap()))
            .collect();
        let r = evaluate(&truth, &truth, &set, &ScoreConfig::default()).unwrap();
        assert_eq!((r.trmse_m, r.coverage, r.pass_coverage), (0.0, 1.0, true));
        let mut extra = truth.clone();
        extra.insert(999, GeodeticPosition::new(0.0, 0.0, 0.0).unwrap());
        assert!(matches!(
            evaluate(&extra, &truth, &set, &ScoreConfig::default()),
            Err(ScoringError::Integrity(_))
        ));
    }

    #[test]
    fn public_split_is_fixed_subset() {
        let flights: BTreeSet<AircraftId> = (0..50).collect();
        let a = public_flights(&flights, 0.3, 9);
        assert_eq!(a, public_flights(&flights, 0.3, 9));
        assert_eq!(a.len(), 15);
        assert!(a.is_subset(&flights));
    }

    #[test]
    fn report_json_keys() {
        let r = ScoreReport {
            trmse_m: 1.0,
            coverage: 0.5,
            n_scored: 3,
            truncation: 0.9,
            split: Split::Public,
            pass_coverage: false,
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        let expect: BTreeSet<&str> =
            ["trmse_m", "coverage", "n_scored", "truncation", "split", "pass_coverage"].into_iter().collect();
        assert_eq!(keys, expect);
        assert_eq!(v["split"], "public");
    }
}
