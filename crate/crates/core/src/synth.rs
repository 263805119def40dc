//! Synthetic scenarios with full ground truth.
//!
//! Receivers are scattered over a latitude/longitude box; a fraction is
//! GPS-disciplined (small constant offsets), the rest run free with an
//! offset, a frequency error and a random walk. Aircraft fly piecewise
//! constant-turn-rate tracks at constant altitude and broadcast once per
//! second. A reception at true arrival time `a` (seconds from the scenario
//! start) is stamped `a (1 + f0) + b0 + rw(a)` plus Gaussian noise, in
//! integer nanoseconds.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atmosphere::AtmosphereModel;
use crate::dataio::{self, DataError, MeasurementRecord, MeasurementSet, Reception, Sensor, SensorId, SensorTable};
use crate::geo::{self, EcefPosition, GeodeticPosition};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario configuration: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Default for Region {
    fn default() -> Self {
        Region {
            lat_min: 46.0,
            lat_max: 49.0,
            lon_min: 5.5,
            lon_max: 10.5,
        }
    }
}

impl Region {
    /// Approximate area in square meters.
    pub fn area_m2(&self) -> f64 {
        let mid = 0.5 * (self.lat_min + self.lat_max);
        let (m, n) = geo::radii_of_curvature(mid);
        let h = m * (self.lat_max - self.lat_min).to_radians();
        let w = n * mid.to_radians().cos() * (self.lon_max - self.lon_min).to_radians();
        h * w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub region: Region,
    pub n_sensors: usize,
    pub fraction_gps: f64,
    /// Minimum spacing between receivers, meters.
    pub sensor_min_separation_m: f64,
    pub sensor_height_range_m: (f64, f64),
    /// Standard deviation of the horizontal error of reported receiver positions.
    pub sensor_position_error_m: f64,
    /// GPS receivers: constant offsets drawn from +-this, ns.
    pub gps_offset_ns: f64,
    /// Free-running receivers: offsets drawn from +-this, seconds.
    pub b0_range_s: f64,
    /// Free-running receivers: frequency errors drawn from +-this.
    pub f0_range: f64,
    /// Standard deviation of the random walk at the end of the scenario, ns.
    pub rw_amplitude_ns: f64,
    pub sigma_ns: f64,
    pub n_flights: usize,
    pub duration_s: f64,
    pub flight_duration_range_s: (f64, f64),
    pub speed_range_m_s: (f64, f64),
    pub altitude_range_m: (f64, f64),
    /// Largest turn rate, degrees per second.
    pub max_turn_rate_deg_s: f64,
    pub broadcast_interval_s: f64,
    pub max_range_m: f64,
    pub reception_probability: f64,
    pub atmosphere: AtmosphereModel,
    /// Geometric minus barometric altitude, meters.
    pub baro_offset_m: f64,
    pub baro_noise_m: f64,
    pub start_unix_s: f64,
    pub server_latency_range_s: (f64, f64),
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            region: Region::default(),
            n_sensors: 50,
            fraction_gps: 0.15,
            sensor_min_separation_m: 2000.0,
            sensor_height_range_m: (200.0, 900.0),
            sensor_position_error_m: 0.0,
            gps_offset_ns: 50.0,
            b0_range_s: 5e-3,
            f0_range: 1e-7,
            rw_amplitude_ns: 100.0,
            sigma_ns: 20.0,
            n_flights: 20,
            duration_s: 1800.0,
            flight_duration_range_s: (600.0, 1200.0),
            speed_range_m_s: (150.0, 280.0),
            altitude_range_m: (1000.0, 12000.0),
            max_turn_rate_deg_s: 1.0,
            broadcast_interval_s: 1.0,
            max_range_m: 400e3,
            reception_probability: 0.35,
            atmosphere: AtmosphereModel { a0: 3.2e-4, b: 1.3e-4 },
            baro_offset_m: 30.0,
            baro_noise_m: 5.0,
            start_unix_s: 1_500_000_000.0,
            server_latency_range_s: (0.05, 0.3),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidArgument(m.into()));
        let r = &self.region;
        if !(r.lat_min < r.lat_max && r.lon_min < r.lon_max && r.lat_min >= -85.0 && r.lat_max <= 85.0 && r.lon_min >= -180.0 && r.lon_max < 180.0) {
            return bad("region bounds are not a valid box");
        }
        if self.n_sensors < 4 {
            return bad("at least 4 sensors are needed");
        }
        if !(0.0..=1.0).contains(&self.fraction_gps) || !(0.0..=1.0).contains(&self.reception_probability) {
            return bad("fractions must lie in [0, 1]");
        }
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !ordered(self.sensor_height_range_m) || !ordered(self.flight_duration_range_s) || !ordered(self.speed_range_m_s) || !ordered(self.altitude_range_m) || !ordered(self.server_latency_range_s) {
            return bad("ranges must be ordered (low <= high)");
        }
        if self.speed_range_m_s.0 <= 0.0 || self.speed_range_m_s.1 > 300.0 {
            return bad("speeds must lie in (0, 300] m/s");
        }
        if self.altitude_range_m.0 < 0.0 || self.altitude_range_m.1 > 20_000.0 {
            return bad("flight altitudes must lie in [0, 20000] m");
        }
        if !(self.sigma_ns >= 0.0 && self.rw_amplitude_ns >= 0.0 && self.gps_offset_ns >= 0.0 && self.b0_range_s >= 0.0 && self.f0_range >= 0.0 && self.f0_range < 1e-3) {
            return bad("clock and noise magnitudes must be non-negative (|f0| < 1e-3)");
        }
        if !(self.duration_s > 0.0 && self.broadcast_interval_s > 0.0 && self.max_range_m > 0.0) {
            return bad("duration, broadcast interval and range must be positive");
        }
        if self.flight_duration_range_s.0 <= 0.0 {
            return bad("flight durations must be positive");
        }
        AtmosphereModel::new(self.atmosphere.a0, self.atmosphere.b).map_err(|e| SynthError::InvalidArgument(e.to_string()))?;
        // hexagonal packing bound for the minimum spacing
        let per_sensor = self.sensor_min_separation_m.powi(2) * 3f64.sqrt() / 2.0;
        if per_sensor * self.n_sensors as f64 > self.region.area_m2() {
            return bad("region too small for the requested number of sensors");
        }
        Ok(())
    }
}

/// Ground-truth clock of one receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthClock {
    pub gps: bool,
    pub b0_s: f64,
    pub f0: f64,
    /// Random-walk samples in ns at `rw_step_s` spacing from time zero.
    pub rw_step_s: f64,
    pub rw_ns: Vec<f64>,
}

impl TruthClock {
    /// Random walk (seconds) at true time `a`, linearly interpolated and held at the ends.
    pub fn rw(&self, a: f64) -> f64 {
        if self.rw_ns.is_empty() {
            return 0.0;
        }
        let x = (a / self.rw_step_s).max(0.0);
        let k = x.floor() as usize;
        if k + 1 >= self.rw_ns.len() {
            return self.rw_ns[self.rw_ns.len() - 1] * 1e-9;
        }
        let u = x - k as f64;
        ((1.0 - u) * self.rw_ns[k] + u * self.rw_ns[k + 1]) * 1e-9
    }

    /// Local clock reading for a true arrival at `a` seconds.
    pub fn measured(&self, a: f64) -> f64 {
        a * (1.0 + self.f0) + self.b0_s + self.rw(a)
    }

    /// Inverse of [`TruthClock::measured`].
    pub fn decode(&self, t: f64) -> f64 {
        let mut a = (t - self.b0_s) / (1.0 + self.f0);
        for _ in 0..4 {
            a = (t - self.b0_s - self.rw(a)) / (1.0 + self.f0);
        }
        a
    }
}

/// Everything needed to check a pipeline against the generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthClocks {
    /// Raw timestamp (ns) that corresponds to local clock time zero.
    pub origin_ns: i64,
    pub atmosphere: AtmosphereModel,
    pub sigma_ns: f64,
    pub clocks: BTreeMap<SensorId, TruthClock>,
    pub true_positions: BTreeMap<SensorId, GeodeticPosition>,
    /// True emission time (seconds from scenario start) of every record.
    pub emission_s: BTreeMap<u64, f64>,
}

impl TruthClocks {
    /// True arrival time in seconds from the scenario start for a raw timestamp.
    pub fn true_arrival(&self, sensor: SensorId, toa_ns: i64) -> Option<f64> {
        let c = self.clocks.get(&sensor)?;
        Some(c.decode((toa_ns - self.origin_ns) as f64 * 1e-9))
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub set: MeasurementSet,
    pub truth: TruthClocks,
}

impl Scenario {
    pub fn sensors(&self) -> &SensorTable {
        &self.set.sensors
    }
}

/// Timestamps are offset by this so that every value is positive.
const ORIGIN_NS: i64 = 1_000_000_000_000;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn symmetric(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..half)
    } else {
        0.0
    }
}

struct FlightPoint {
    t: f64,
    pos: GeodeticPosition,
}

fn place_sensors(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<GeodeticPosition>, SynthError> {
    let r = &cfg.region;
    let mut out: Vec<GeodeticPosition> = Vec::with_capacity(cfg.n_sensors);
    let mut tries = 0usize;
    while out.len() < cfg.n_sensors {
        tries += 1;
        if tries > 2000 * cfg.n_sensors {
            return Err(SynthError::InvalidArgument("region too small for the requested number of sensors".into()));
        }
        let p = GeodeticPosition {
            latitude: uniform(rng, (r.lat_min, r.lat_max)),
            longitude: uniform(rng, (r.lon_min, r.lon_max)),
            altitude: uniform(rng, cfg.sensor_height_range_m),
        };
        if out.iter().all(|q| geo::ground_distance(&p, q) >= cfg.sensor_min_separation_m) {
            out.push(p);
        }
    }
    Ok(out)
}

fn fly(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<FlightPoint> {
    let r = &cfg.region;
    let len = uniform(rng, cfg.flight_duration_range_s).min(cfg.duration_s);
    let start = uniform(rng, (0.0, (cfg.duration_s - len).max(0.0)));
    let mut pos = GeodeticPosition {
        latitude: uniform(rng, (r.lat_min, r.lat_max)),
        longitude: uniform(rng, (r.lon_min, r.lon_max)),
        altitude: uniform(rng, cfg.altitude_range_m),
    };
    let speed = uniform(rng, cfg.speed_range_m_s);
    let mut heading = uniform(rng, (0.0, 360.0)).to_radians();
    let mut turn = 0.0;
    let mut next_change = 0.0;
    let mut out = Vec::new();
    let n = (len / cfg.broadcast_interval_s).floor() as usize + 1;
    for k in 0..n {
        let t = start + k as f64 * cfg.broadcast_interval_s;
        out.push(FlightPoint { t, pos });
        let elapsed = k as f64 * cfg.broadcast_interval_s;
        if elapsed >= next_change {
            // straight legs and constant-rate turns
            turn = if rng.random_bool(0.5) { 0.0 } else { symmetric(rng, cfg.max_turn_rate_deg_s).to_radians() };
            next_change = elapsed + uniform(rng, (30.0, 180.0));
        }
        let dt = cfg.broadcast_interval_s;
        let mid = heading + 0.5 * turn * dt;
        pos = geo::offset_horizontal(&pos, speed * dt * mid.sin(), speed * dt * mid.cos());
        pos.latitude = pos.latitude.clamp(-89.0, 89.0);
        heading += turn * dt;
    }
    out
}

fn random_walk(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if cfg.rw_amplitude_ns <= 0.0 {
        return Vec::new();
    }
    let steps = cfg.duration_s.ceil() as usize + 2;
    // the walk's standard deviation reaches the amplitude at the end of the span
    let step = Normal::new(0.0, cfg.rw_amplitude_ns / cfg.duration_s.sqrt()).expect("valid sigma");
    let mut x = 0.0;
    (0..steps)
        .map(|_| {
            let v = x;
            x += step.sample(rng);
            v
        })
        .collect()
}

/// Builds a scenario in memory.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Scenario, SynthError> {
    cfg.validate()?;
    let mut geo_rng = rng_for(cfg.seed, 1);
    let mut clock_rng = rng_for(cfg.seed, 2);
    let mut noise_rng = rng_for(cfg.seed, 3);
    let mut flight_rng = rng_for(cfg.seed, 4);

    let true_pos = place_sensors(cfg, &mut geo_rng)?;
    let n_gps = (cfg.fraction_gps * cfg.n_sensors as f64).round() as usize;
    let mut sensors = SensorTable::new();
    let mut clocks = BTreeMap::new();
    let mut true_positions = BTreeMap::new();
    for (i, p) in true_pos.iter().enumerate() {
        let id = i as SensorId + 1;
        let gps = i < n_gps;
        let reported = if cfg.sensor_position_error_m > 0.0 {
            let n = Normal::new(0.0, cfg.sensor_position_error_m).expect("valid sigma");
            geo::offset_horizontal(p, n.sample(&mut geo_rng), n.sample(&mut geo_rng))
        } else {
            *p
        };
        let label = if gps { "GRX1090" } else { "dump1090" };
        sensors.insert(Sensor::new(id, reported, label))?;
        let clock = if gps {
            TruthClock {
                gps,
                b0_s: symmetric(&mut clock_rng, cfg.gps_offset_ns) * 1e-9,
                f0: 0.0,
                rw_step_s: 1.0,
                rw_ns: Vec::new(),
            }
        } else {
            TruthClock {
                gps,
                b0_s: symmetric(&mut clock_rng, cfg.b0_range_s),
                f0: symmetric(&mut clock_rng, cfg.f0_range),
                rw_step_s: 1.0,
                rw_ns: random_walk(cfg, &mut clock_rng),
            }
        };
        clocks.insert(id, clock);
        true_positions.insert(id, *p);
    }
    let sensor_ecef: Vec<(SensorId, EcefPosition, f64)> = true_positions
        .iter()
        .map(|(id, p)| (*id, geo::geodetic_to_ecef_unchecked(p.latitude, p.longitude, p.altitude), p.altitude))
        .collect();

    let noise = (cfg.sigma_ns > 0.0).then(|| Normal::new(0.0, cfg.sigma_ns).expect("valid sigma"));
    let baro_noise = (cfg.baro_noise_m > 0.0).then(|| Normal::new(0.0, cfg.baro_noise_m).expect("valid sigma"));
    struct Pending {
        t: f64,
        aircraft: u64,
        rec: MeasurementRecord,
    }
    let mut pending: Vec<Pending> = Vec::new();
    for f in 0..cfg.n_flights {
        let aircraft = 0x400000 + f as u64;
        for fp in fly(cfg, &mut flight_rng) {
            let target = geo::geodetic_to_ecef_unchecked(fp.pos.latitude, fp.pos.longitude, fp.pos.altitude);
            let mut receptions = Vec::new();
            for (id, s, h) in &sensor_ecef {
                let d = target.distance(s);
                if d > cfg.max_range_m {
                    continue;
                }
                if cfg.reception_probability < 1.0 && !noise_rng.random_bool(cfg.reception_probability) {
                    continue;
                }
                let arrival = fp.t + cfg.atmosphere.propagation_time(d, *h, fp.pos.altitude);
                let clock = &clocks[id];
                let eps = noise.as_ref().map_or(0.0, |n| n.sample(&mut noise_rng));
                let toa = ORIGIN_NS as f64 + clock.measured(arrival) * 1e9 + eps;
                receptions.push(Reception {
                    sensor_id: *id,
                    toa_ns: toa.round() as i64,
                    rssi: (-30.0 - 20.0 * (d / 1000.0).max(1.0).log10() * 100.0).round() / 100.0,
                });
            }
            if receptions.is_empty() {
                continue;
            }
            let latency = uniform(&mut noise_rng, cfg.server_latency_range_s);
            let baro = fp.pos.altitude - cfg.baro_offset_m + baro_noise.as_ref().map_or(0.0, |n| n.sample(&mut noise_rng));
            pending.push(Pending {
                t: fp.t,
                aircraft,
                rec: MeasurementRecord {
                    record_id: 0,
                    aircraft_id: aircraft,
                    // millisecond resolution, as a server clock would log it
                    server_time: ((cfg.start_unix_s + fp.t + latency) * 1e3).round() / 1e3,
                    truth: Some(fp.pos),
                    baro_altitude: Some((baro * 100.0).round() / 100.0),
                    receptions,
                },
            });
        }
    }
    pending.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.aircraft.cmp(&b.aircraft)));
    let mut emission_s = BTreeMap::new();
    let records: Vec<MeasurementRecord> = pending
        .into_iter()
        .enumerate()
        .map(|(i, mut p)| {
            p.rec.record_id = i as u64 + 1;
            emission_s.insert(p.rec.record_id, p.t);
            p.rec
        })
        .collect();
    if records.is_empty() {
        return Err(SynthError::InvalidArgument("no broadcast was received by any sensor".into()));
    }
    let set = MeasurementSet::new(records, sensors)?;
    Ok(Scenario {
        set,
        truth: TruthClocks {
            origin_ns: ORIGIN_NS,
            atmosphere: cfg.atmosphere,
            sigma_ns: cfg.sigma_ns,
            clocks,
            true_positions,
            emission_s,
        },
    })
}

pub const SENSORS_FILE: &str = "sensors.csv";
pub const MEASUREMENTS_FILE: &str = "measurements.csv";
pub const TRUTH_CLOCKS_FILE: &str = "truth_clocks.json";

/// Writes the scenario files into an existing directory.
pub fn write_scenario(scenario: &Scenario, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(SynthError::InvalidArgument(format!("output directory {} does not exist", dir.display())));
    }
    dataio::write_sensors(&scenario.set.sensors, dir.join(SENSORS_FILE))?;
    dataio::write_measurements(&scenario.set, dir.join(MEASUREMENTS_FILE))?;
    let body = serde_json::to_string_pretty(&scenario.truth).map_err(|e| SynthError::InvalidArgument(e.to_string()))?;
    dataio::atomic_write(&dir.join(TRUTH_CLOCKS_FILE), |w| w.write_all(body.as_bytes()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            n_sensors: 20,
            n_flights: 3,
            duration_s: 300.0,
            flight_duration_range_s: (100.0, 200.0),
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate_scenario(&small()).unwrap();
        let b = generate_scenario(&small()).unwrap();
        assert_eq!(a.set, b.set);
        let c = generate_scenario(&ScenarioConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.set.records, c.set.records);
    }

    #[test]
    fn gps_fraction_matches() {
        let s = generate_scenario(&ScenarioConfig { n_sensors: 40, ..small() }).unwrap();
        let gps = s.set.sensors.iter().filter(|x| x.synchronized).count();
        assert_eq!(gps, 6);
    }

    #[test]
    fn region_too_small_is_rejected() {
        let cfg = ScenarioConfig {
            region: Region {
                lat_min: 47.0,
                lat_max: 47.01,
                lon_min: 8.0,
                lon_max: 8.01,
            },
            ..small()
        };
        assert!(matches!(generate_scenario(&cfg), Err(SynthError::InvalidArgument(_))));
    }

    #[test]
    fn vacuum_gps_noiseless_tdoas_are_geometric() {
        let cfg = ScenarioConfig {
            fraction_gps: 1.0,
            gps_offset_ns: 0.0,
            sigma_ns: 0.0,
            atmosphere: AtmosphereModel::vacuum(),
            ..small()
        };
        let s = generate_scenario(&cfg).unwrap();
        let c = crate::atmosphere::SPEED_OF_LIGHT;
        for rec in s.set.records.iter().take(50) {
            let target = rec.truth.unwrap().to_ecef().unwrap();
            let r0 = &rec.receptions[0];
            let s0 = s.set.sensors.get(r0.sensor_id).unwrap().ecef();
            for r in &rec.receptions[1..] {
                let si = s.set.sensors.get(r.sensor_id).unwrap().ecef();
                let geom = (target.distance(&si) - target.distance(&s0)) / c * 1e9;
                assert!(((r.toa_ns - r0.toa_ns) as f64 - geom).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn truth_clocks_decode_arrivals() {
        let cfg = ScenarioConfig {
            sigma_ns: 0.0,
            fraction_gps: 0.2,
            ..small()
        };
        let s = generate_scenario(&cfg).unwrap();
        for rec in s.set.records.iter().take(100) {
            let emit = s.truth.emission_s[&rec.record_id];
            let target = rec.truth.unwrap().to_ecef().unwrap();
            for r in &rec.receptions {
                let p = s.truth.true_positions[&r.sensor_id];
                let d = target.distance(&p.to_ecef().unwrap());
                let delay = s.truth.atmosphere.propagation_time(d, p.altitude, rec.truth.unwrap().altitude);
                let a = s.truth.true_arrival(r.sensor_id, r.toa_ns).unwrap();
                assert!((a - emit - delay).abs() < 1e-9, "{}", (a - emit - delay));
            }
        }
    }
}
