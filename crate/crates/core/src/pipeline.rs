//! Stage orchestration shared by the command-line tool, the acceptance
//! target and the benches: synchronization, localization and scoring.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atmosphere::AtmosphereModel;
use crate::clocksync::{
    correct_timestamps, fit_core_network, propagate_network_sync, select_core, CoreFitOptions, PropagateOptions,
    RoundSummary, SensorNoiseModel, SyncError, SyncState,
};
use crate::dataio::{AircraftId, DataError, MeasurementRecord, MeasurementSet, RecordId, SensorId};
use crate::exec::Execution;
use crate::geo::GeodeticPosition;
use crate::mlat::{self, AltitudeConstraint, MlatError, PositionSolution, SolverOptions, TdoaProblem};
use crate::robust::median;
use crate::scoring::{self, ErrorMetric, PredictionSet, ScoreConfig, ScoreReport, ScoringError, Split};
use crate::synth::{ScenarioConfig, SynthError};
use crate::trajectory::{
    self, PointSource, ReconstructOptions, SplineOptions, Track, TrackPoint, TrackTarget, MAX_SPEED_M_S,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Ls,
    #[default]
    L1,
}

/// Flat configuration for every stage. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sensors: PathBuf,
    pub measurements: PathBuf,
    pub masked: PathBuf,
    pub truth: PathBuf,
    pub sync_state: PathBuf,
    pub submission: PathBuf,
    pub score_report: PathBuf,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,

    pub seed: u64,
    pub n_sensors: usize,
    pub n_flights: usize,
    pub fraction_gps: f64,
    pub duration_s: f64,
    pub b0_range_s: f64,
    pub f0_range: f64,
    pub rw_amplitude_ns: f64,
    pub sensor_position_error_m: f64,
    pub reception_probability: f64,
    pub max_range_m: f64,
    pub a0: f64,
    pub b: f64,
    /// Timestamp noise of generated data, ns.
    pub noise_ns: f64,

    pub mask_fraction: f64,
    pub mask_seed: u64,

    pub sigma_ns: f64,
    pub core_size: usize,
    pub core_max_records: usize,
    pub core_max_iterations: usize,
    pub fit_positions: bool,
    pub fit_atmosphere: bool,
    pub position_bound_m: f64,
    pub min_samples: usize,
    pub clock_knot_spacing_s: f64,
    pub exclusion_sigma: f64,
    pub max_rounds: usize,
    pub random_walk: bool,

    pub solver: Solver,
    pub weighted: bool,
    pub altitude_constraint: AltitudeConstraint,
    pub max_speed_m_s: f64,
    pub reconstruct_window_s: f64,
    pub reconstruct_min_points: usize,
    pub keep_fraction: f64,
    pub max_gap_s: f64,
    pub coverage_target: f64,

    pub truncation: f64,
    pub metric: ErrorMetric,
    pub split: Split,
    pub split_fraction: f64,
    pub split_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let sc = ScenarioConfig::default();
        let core = CoreFitOptions::default();
        let prop = PropagateOptions::default();
        let score = ScoreConfig::default();
        PipelineConfig {
            sensors: "sensors.csv".into(),
            measurements: "measurements.csv".into(),
            masked: "masked.csv".into(),
            truth: "truth.csv".into(),
            sync_state: "sync_state.json".into(),
            submission: "submission.csv".into(),
            score_report: "score.json".into(),
            output_dir: ".".into(),
            threads: None,
            seed: sc.seed,
            n_sensors: sc.n_sensors,
            n_flights: sc.n_flights,
            fraction_gps: sc.fraction_gps,
            duration_s: sc.duration_s,
            b0_range_s: sc.b0_range_s,
            f0_range: sc.f0_range,
            rw_amplitude_ns: sc.rw_amplitude_ns,
            sensor_position_error_m: sc.sensor_position_error_m,
            reception_probability: sc.reception_probability,
            max_range_m: sc.max_range_m,
            a0: sc.atmosphere.a0,
            b: sc.atmosphere.b,
            noise_ns: sc.sigma_ns,
            mask_fraction: 0.3,
            mask_seed: 0,
            sigma_ns: sc.sigma_ns,
            core_size: 30,
            core_max_records: core.max_records,
            core_max_iterations: core.max_iterations,
            fit_positions: core.fit_positions,
            fit_atmosphere: core.fit_atmosphere,
            position_bound_m: core.position_bound_m,
            min_samples: prop.min_samples,
            clock_knot_spacing_s: prop.knot_spacing_s,
            exclusion_sigma: prop.exclusion_sigma,
            max_rounds: prop.max_rounds,
            random_walk: prop.random_walk,
            solver: Solver::L1,
            weighted: false,
            altitude_constraint: AltitudeConstraint::Always,
            max_speed_m_s: MAX_SPEED_M_S,
            reconstruct_window_s: ReconstructOptions::default().window_s,
            reconstruct_min_points: ReconstructOptions::default().min_points,
            keep_fraction: 0.95,
            max_gap_s: SplineOptions::default().max_gap_s,
            coverage_target: score.min_coverage,
            truncation: score.truncation,
            metric: score.metric,
            split: score.split,
            split_fraction: score.split_fraction,
            split_seed: score.split_seed,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::usage("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::usage("config", m));
        if !(self.coverage_target > 0.0 && self.coverage_target <= 1.0) {
            return bad("coverage_target must lie in (0, 1]");
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad("keep_fraction must lie in (0, 1]");
        }
        if !(self.truncation > 0.0 && self.truncation <= 1.0) {
            return bad("truncation must lie in (0, 1]");
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction <= 1.0) {
            return bad("mask_fraction must lie in (0, 1]");
        }
        if !(self.sigma_ns > 0.0) {
            return bad("sigma_ns must be positive");
        }
        if !(self.max_speed_m_s > 0.0 && self.reconstruct_window_s > 0.0 && self.max_gap_s >= 0.0) {
            return bad("speed bound and reconstruction window must be positive");
        }
        if self.core_size < 4 {
            return bad("core_size must be at least 4");
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1");
        }
        Ok(())
    }

    pub fn scenario(&self) -> ScenarioConfig {
        ScenarioConfig {
            seed: self.seed,
            n_sensors: self.n_sensors,
            n_flights: self.n_flights,
            fraction_gps: self.fraction_gps,
            duration_s: self.duration_s,
            b0_range_s: self.b0_range_s,
            f0_range: self.f0_range,
            rw_amplitude_ns: self.rw_amplitude_ns,
            sensor_position_error_m: self.sensor_position_error_m,
            reception_probability: self.reception_probability,
            max_range_m: self.max_range_m,
            sigma_ns: self.noise_ns,
            atmosphere: AtmosphereModel { a0: self.a0, b: self.b },
            ..ScenarioConfig::default()
        }
    }

    pub fn core_options(&self) -> CoreFitOptions {
        CoreFitOptions {
            max_records: self.core_max_records,
            max_iterations: self.core_max_iterations,
            position_bound_m: self.position_bound_m,
            fit_positions: self.fit_positions,
            fit_atmosphere: self.fit_atmosphere,
            ..CoreFitOptions::default()
        }
    }

    pub fn propagate_options(&self) -> PropagateOptions {
        PropagateOptions {
            min_samples: self.min_samples,
            knot_spacing_s: self.clock_knot_spacing_s,
            exclusion_sigma: self.exclusion_sigma,
            max_rounds: self.max_rounds,
            random_walk: self.random_walk,
            ..PropagateOptions::default()
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            weighted: self.weighted,
            altitude_constraint: self.altitude_constraint,
            ..SolverOptions::default()
        }
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig {
            truncation: self.truncation,
            min_coverage: self.coverage_target,
            split_fraction: self.split_fraction,
            split_seed: self.split_seed,
            split: self.split,
            metric: self.metric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Integrity,
    Numerical,
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn usage(stage: &'static str, message: impl Into<String>) -> Self {
        PipelineError { stage, kind: ErrorKind::Usage, message: message.into() }
    }

    pub fn integrity(stage: &'static str, message: impl Into<String>) -> Self {
        PipelineError { stage, kind: ErrorKind::Integrity, message: message.into() }
    }

    pub fn numerical(stage: &'static str, message: impl Into<String>) -> Self {
        PipelineError { stage, kind: ErrorKind::Numerical, message: message.into() }
    }

    /// Process exit code: 1 usage, 2 data integrity, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Integrity => 2,
            ErrorKind::Numerical => 3,
        }
    }

    pub fn from_data(stage: &'static str, e: DataError) -> Self {
        match e {
            DataError::InvalidArgument(m) => Self::usage(stage, m),
            DataError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => Self::usage(stage, e.to_string()),
            other => Self::integrity(stage, other.to_string()),
        }
    }

    pub fn from_sync(stage: &'static str, e: SyncError) -> Self {
        match e {
            SyncError::InvalidArgument(m) => Self::integrity(stage, m),
            other => Self::numerical(stage, other.to_string()),
        }
    }

    pub fn from_scoring(stage: &'static str, e: ScoringError) -> Self {
        match e {
            ScoringError::InvalidArgument(m) => Self::usage(stage, m),
            other => Self::integrity(stage, other.to_string()),
        }
    }

    pub fn from_synth(stage: &'static str, e: SynthError) -> Self {
        match e {
            SynthError::InvalidArgument(m) => Self::usage(stage, m),
            SynthError::Data(d) => Self::from_data(stage, d),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SyncReport {
    pub core: Vec<SensorId>,
    pub core_residual_median_ns: f64,
    pub core_residual_p90_ns: f64,
    pub atmosphere: AtmosphereModel,
    pub rounds: Vec<RoundSummary>,
    pub synchronized: usize,
    pub excluded: usize,
    pub pending: usize,
}

/// Core fit followed by propagation to the rest of the network.
pub fn run_sync(set: &MeasurementSet, cfg: &PipelineConfig, exec: Execution) -> Result<(SyncState, SyncReport), PipelineError> {
    const STAGE: &str = "sync";
    let noise = SensorNoiseModel::new(cfg.sigma_ns).map_err(|e| PipelineError::from_sync(STAGE, e))?;
    let core = select_core(set, cfg.core_size).map_err(|e| PipelineError::from_sync(STAGE, e))?;
    log::info!("core network: {} sensors", core.len());
    let fit = fit_core_network(set, &core, &noise, &cfg.core_options(), exec).map_err(|e| PipelineError::from_sync(STAGE, e))?;
    log::info!(
        "core fit: {} iterations, median |residual| {:.2} ns, a0 {:.3e}, b {:.3e}",
        fit.iterations,
        fit.residual_median_ns,
        fit.atmosphere.a0,
        fit.atmosphere.b
    );
    let initial = SyncState::from_core_fit(set, &fit, &noise).map_err(|e| PipelineError::from_sync(STAGE, e))?;
    let (state, rounds) =
        propagate_network_sync(set, &initial, &cfg.propagate_options(), exec).map_err(|e| PipelineError::from_sync(STAGE, e))?;
    let count = |f: fn(&crate::clocksync::SensorStatus) -> bool| state.ids_with(f).len();
    let report = SyncReport {
        core: fit.sensor_ids.clone(),
        core_residual_median_ns: fit.residual_median_ns,
        core_residual_p90_ns: fit.residual_p90_ns,
        atmosphere: fit.atmosphere,
        synchronized: count(|s| s.is_synchronized()),
        excluded: count(|s| matches!(s, crate::clocksync::SensorStatus::Excluded { .. })),
        pending: count(|s| !s.is_settled()),
        rounds,
    };
    log::info!(
        "sync: {} synchronized, {} excluded, {} pending after {} rounds",
        report.synchronized,
        report.excluded,
        report.pending,
        report.rounds.len()
    );
    Ok((state, report))
}

/// Builds the multilateration problem for one record from its corrected
/// timestamps; `None` when fewer than three synchronized receptions remain.
pub fn record_problem(record: &MeasurementRecord, state: &SyncState, baro_offset: f64) -> Option<TdoaProblem> {
    let corrected = correct_timestamps(record, state);
    if corrected.toas.len() < 3 {
        return None;
    }
    let rx = corrected
        .toas
        .iter()
        .map(|(id, t)| (*id, state.sensors[id].position, *t))
        .collect();
    let baro = record.baro_altitude.map(|b| b + baro_offset);
    TdoaProblem::new(rx, state.atmosphere, state.noise.clone(), baro).ok()
}

pub fn solve(problem: &TdoaProblem, guess: &crate::geo::EcefPosition, solver: Solver, opts: &SolverOptions) -> Result<PositionSolution, MlatError> {
    match solver {
        Solver::Ls => mlat::solve_position_ls(problem, guess, opts),
        Solver::L1 => mlat::solve_position_l1(problem, guess, opts),
    }
}

/// Per-record solver output for one aircraft, in server-time order.
#[derive(Debug, Clone)]
pub struct FlightFixes {
    pub aircraft_id: AircraftId,
    pub records: Vec<RecordId>,
    pub fixes: BTreeMap<RecordId, PositionSolution>,
}

fn group_maskable(set: &MeasurementSet) -> Vec<(AircraftId, Vec<&MeasurementRecord>)> {
    let mut groups: BTreeMap<AircraftId, Vec<&MeasurementRecord>> = BTreeMap::new();
    for r in set.maskable_records() {
        groups.entry(r.aircraft_id).or_default().push(r);
    }
    groups.into_iter().collect()
}

fn solve_flight(records: &[&MeasurementRecord], state: &SyncState, solver: Solver, opts: &SolverOptions, baro_offset: f64) -> BTreeMap<RecordId, PositionSolution> {
    let mut out = BTreeMap::new();
    let mut previous: Option<PositionSolution> = None;
    for rec in records {
        let Some(problem) = record_problem(rec, state, baro_offset) else {
            continue;
        };
        let guess = mlat::initial_guess(&problem, previous.as_ref());
        match solve(&problem, &guess, solver, opts) {
            Ok(sol) if sol.position.is_near_earth() => {
                previous = Some(sol);
                out.insert(rec.record_id, sol);
            }
            Ok(_) => log::debug!("record {}: solution far from the earth surface", rec.record_id),
            Err(e) => log::debug!("record {}: {e}", rec.record_id),
        }
    }
    out
}

/// Solves every maskable record, aircraft by aircraft in parallel.
pub fn solve_records(set: &MeasurementSet, state: &SyncState, solver: Solver, opts: &SolverOptions, exec: Execution) -> Vec<FlightFixes> {
    let baro = trajectory::baro_offset(set);
    let groups = group_maskable(set);
    exec.map(&groups, |(aircraft, recs)| FlightFixes {
        aircraft_id: *aircraft,
        records: recs.iter().map(|r| r.record_id).collect(),
        fixes: solve_flight(recs, state, solver, opts, baro),
    })
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct LocalizeStats {
    pub maskable: usize,
    pub solved: usize,
    pub filtered: usize,
    pub screened: usize,
    pub reconstructed: usize,
    pub gap_filled: usize,
    pub candidates: usize,
    pub emitted: usize,
}

#[derive(Debug, Clone)]
pub struct Localization {
    pub predictions: PredictionSet,
    /// Raw solver output before any post-processing.
    pub raw: PredictionSet,
    /// Every post-processed candidate, per aircraft.
    pub tracks: Vec<Track>,
    pub stats: LocalizeStats,
}

fn post_process(set_records: &[&MeasurementRecord], fixes: &FlightFixes, cfg: &PipelineConfig, baro_offset: f64) -> (Track, usize, usize) {
    let solved: Vec<TrackPoint> = fixes
        .fixes
        .iter()
        .filter_map(|(id, sol)| {
            Some(TrackPoint {
                record_id: *id,
                aircraft_time: sol.aircraft_time,
                position: sol.position.to_geodetic().ok()?,
                source: PointSource::Solved,
                est_error: None,
            })
        })
        .collect();
    // server time to aircraft time, from the solved records
    let shifts: Vec<f64> = set_records
        .iter()
        .filter_map(|r| fixes.fixes.get(&r.record_id).map(|s| s.aircraft_time - r.server_time))
        .collect();
    let Some(shift) = median(&shifts) else {
        return (Track::new(fixes.aircraft_id, Vec::new()), 0, 0);
    };
    let targets: Vec<TrackTarget> = set_records
        .iter()
        .map(|r| TrackTarget {
            record_id: r.record_id,
            aircraft_time: fixes.fixes.get(&r.record_id).map_or(r.server_time + shift, |s| s.aircraft_time),
            altitude: r.baro_altitude.map(|b| b + baro_offset),
        })
        .collect();

    let track = Track::new(fixes.aircraft_id, solved);
    let filtered = trajectory::velocity_graph_filter(&track.points, cfg.max_speed_m_s);
    let n_filtered = filtered.removed.len();
    let track = Track::new(fixes.aircraft_id, filtered.retained);
    let recon = ReconstructOptions {
        window_s: cfg.reconstruct_window_s,
        min_points: cfg.reconstruct_min_points,
    };
    let track = trajectory::local_quadratic_reconstruct(&track, &targets, &recon);
    let spline = SplineOptions {
        max_gap_s: cfg.max_gap_s,
        ..SplineOptions::default()
    };
    let min_keep = (cfg.coverage_target * track.len() as f64).ceil() as usize;
    let screened = trajectory::spline_error_screen(&track, cfg.keep_fraction, min_keep, &spline);
    let n_screened = screened.removed.len();
    let mut track = trajectory::fill_gaps(&screened.track, &targets, cfg.max_gap_s, &spline);
    let alt: BTreeMap<RecordId, f64> = targets.iter().filter_map(|t| Some((t.record_id, t.altitude?))).collect();
    for p in &mut track.points {
        if let Some(a) = alt.get(&p.record_id) {
            p.position.altitude = *a;
        }
    }
    (track, n_filtered, n_screened)
}

/// Orders candidates by estimated error (unknown last, then record id) and
/// keeps `ceil(coverage_target * maskable)` of them when that many exist.
pub fn select_for_coverage(tracks: &[Track], maskable: usize, coverage_target: f64) -> PredictionSet {
    let mut all: Vec<&TrackPoint> = tracks.iter().flat_map(|t| t.points.iter()).collect();
    all.sort_by(|a, b| match (a.est_error, b.est_error) {
        (Some(x), Some(y)) => x.total_cmp(&y).then(a.record_id.cmp(&b.record_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.record_id.cmp(&b.record_id),
    });
    let quota = (coverage_target * maskable as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut out = PredictionSet::default();
    for p in all.into_iter().take(quota) {
        out.insert(p.record_id, p.position);
    }
    out
}

/// Solving, post-processing and coverage targeting for all maskable records.
pub fn run_localize(set: &MeasurementSet, state: &SyncState, cfg: &PipelineConfig, exec: Execution) -> Localization {
    let baro = trajectory::baro_offset(set);
    let opts = cfg.solver_options();
    let groups = group_maskable(set);
    let maskable: usize = groups.iter().map(|g| g.1.len()).sum();
    let per_flight = exec.map(&groups, |(aircraft, recs)| {
        let fixes = FlightFixes {
            aircraft_id: *aircraft,
            records: recs.iter().map(|r| r.record_id).collect(),
            fixes: solve_flight(recs, state, cfg.solver, &opts, baro),
        };
        let processed = post_process(recs, &fixes, cfg, baro);
        (fixes, processed)
    });
    let mut stats = LocalizeStats {
        maskable,
        ..Default::default()
    };
    let mut raw = PredictionSet::default();
    let mut tracks = Vec::with_capacity(per_flight.len());
    for (fixes, (track, filtered, screened)) in per_flight {
        stats.solved += fixes.fixes.len();
        stats.filtered += filtered;
        stats.screened += screened;
        for (id, sol) in &fixes.fixes {
            if let Ok(g) = sol.position.to_geodetic() {
                raw.insert(*id, g);
            }
        }
        stats.reconstructed += track.points.iter().filter(|p| p.source == PointSource::Reconstructed).count();
        stats.gap_filled += track.points.iter().filter(|p| p.source == PointSource::GapFilled).count();
        stats.candidates += track.len();
        tracks.push(track);
    }
    let predictions = select_for_coverage(&tracks, maskable, cfg.coverage_target);
    stats.emitted = predictions.len();
    log::info!(
        "localize: {} maskable, {} solved, {} removed by speed, {} by screening, {} candidates, {} emitted",
        stats.maskable,
        stats.solved,
        stats.filtered,
        stats.screened,
        stats.candidates,
        stats.emitted
    );
    Localization {
        predictions,
        raw,
        tracks,
        stats,
    }
}

pub fn run_score(preds: &PredictionSet, truth: &PredictionSet, masked: &MeasurementSet, cfg: &PipelineConfig) -> Result<ScoreReport, PipelineError> {
    scoring::evaluate(preds, truth, masked, &cfg.score_config()).map_err(|e| PipelineError::from_scoring("score", e))
}

/// Convenience for in-memory runs: positions as a prediction set.
pub fn to_predictions<'a>(points: impl IntoIterator<Item = (RecordId, &'a GeodeticPosition)>) -> PredictionSet {
    let mut out = PredictionSet::default();
    for (id, p) in points {
        out.insert(id, *p);
    }
    out
}
