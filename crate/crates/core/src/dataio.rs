//! LocaRDS-style CSV files: sensor tables, measurement sets, submissions.
//!
//! Measurement rows carry one broadcast each:
//! `id,timeAtServer,aircraft,latitude,longitude,baroAltitude,geoAltitude,numMeasurements,measurements`
//! where `measurements` is a JSON array of `[sensorId, timestampNs, rssi]`.
//! Sensor rows are `serial,latitude,longitude,height,type` and submissions
//! are `id,latitude,longitude,geoAltitude`. Empty fields are missing values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{EcefPosition, GeodeticPosition};
use crate::scoring::PredictionSet;

pub type SensorId = u32;
pub type RecordId = u64;
pub type AircraftId = u64;

pub const MEASUREMENT_HEADER: [&str; 9] = [
    "id",
    "timeAtServer",
    "aircraft",
    "latitude",
    "longitude",
    "baroAltitude",
    "geoAltitude",
    "numMeasurements",
    "measurements",
];
pub const SENSOR_HEADER: [&str; 5] = ["serial", "latitude", "longitude", "height", "type"];
pub const SUBMISSION_HEADER: [&str; 4] = ["id", "latitude", "longitude", "geoAltitude"];

/// Sensor type labels whose receivers carry a GPS-disciplined clock.
const GPS_TYPES: [&str; 3] = ["grx1090", "radarcape", "gps"];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("{0} contains no records")]
    Empty(PathBuf),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub sensor_id: SensorId,
    pub position: GeodeticPosition,
    pub synchronized: bool,
    pub sensor_type: String,
}

impl Sensor {
    pub fn new(sensor_id: SensorId, position: GeodeticPosition, sensor_type: impl Into<String>) -> Self {
        let sensor_type = sensor_type.into();
        Sensor {
            sensor_id,
            position,
            synchronized: is_gps_type(&sensor_type),
            sensor_type,
        }
    }

    pub fn ecef(&self) -> EcefPosition {
        crate::geo::geodetic_to_ecef_unchecked(
            self.position.latitude,
            self.position.longitude,
            self.position.altitude,
        )
    }
}

pub fn is_gps_type(label: &str) -> bool {
    let l = label.to_ascii_lowercase();
    GPS_TYPES.iter().any(|g| l.contains(g))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SensorTable {
    sensors: BTreeMap<SensorId, Sensor>,
}

impl SensorTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, sensor: Sensor) -> Result<(), DataError> {
        if self.sensors.contains_key(&sensor.sensor_id) {
            return Err(DataError::Integrity(format!("duplicate sensor id {}", sensor.sensor_id)));
        }
        self.sensors.insert(sensor.sensor_id, sensor);
        Ok(())
    }

    pub fn get(&self, id: SensorId) -> Option<&Sensor> {
        self.sensors.get(&id)
    }

    pub fn contains(&self, id: SensorId) -> bool {
        self.sensors.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sensor> {
        self.sensors.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = SensorId> + '_ {
        self.sensors.keys().copied()
    }
}

impl FromIterator<Sensor> for SensorTable {
    /// Later duplicates replace earlier ones; use [`SensorTable::insert`] to detect them.
    fn from_iter<I: IntoIterator<Item = Sensor>>(iter: I) -> Self {
        SensorTable {
            sensors: iter.into_iter().map(|s| (s.sensor_id, s)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reception {
    pub sensor_id: SensorId,
    /// Raw sensor clock reading in nanoseconds.
    pub toa_ns: i64,
    pub rssi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub record_id: RecordId,
    pub aircraft_id: AircraftId,
    /// Unix seconds.
    pub server_time: f64,
    /// Broadcast position; `None` for records whose position is to be predicted.
    pub truth: Option<GeodeticPosition>,
    pub baro_altitude: Option<f64>,
    pub receptions: Vec<Reception>,
}

impl MeasurementRecord {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.receptions.is_empty() {
            return Err(DataError::Integrity(format!("record {} has no receptions", self.record_id)));
        }
        let mut seen = BTreeSet::new();
        for r in &self.receptions {
            if !seen.insert(r.sensor_id) {
                return Err(DataError::Integrity(format!(
                    "record {} lists sensor {} twice",
                    self.record_id, r.sensor_id
                )));
            }
            if r.toa_ns < 0 {
                return Err(DataError::Integrity(format!(
                    "record {} has negative timestamp",
                    self.record_id
                )));
            }
        }
        Ok(())
    }

    pub fn reception(&self, sensor: SensorId) -> Option<&Reception> {
        self.receptions.iter().find(|r| r.sensor_id == sensor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub records: Vec<MeasurementRecord>,
    pub sensors: SensorTable,
}

impl MeasurementSet {
    /// Checks the invariants and sorts records by server time (ties by id).
    pub fn new(mut records: Vec<MeasurementRecord>, sensors: SensorTable) -> Result<Self, DataError> {
        for r in &records {
            r.validate()?;
            if let Some(bad) = r.receptions.iter().find(|x| !sensors.contains(x.sensor_id)) {
                return Err(DataError::Integrity(format!(
                    "record {} references unknown sensor {}",
                    r.record_id, bad.sensor_id
                )));
            }
        }
        let mut ids = BTreeSet::new();
        if let Some(dup) = records.iter().find(|r| !ids.insert(r.record_id)) {
            return Err(DataError::Integrity(format!("duplicate record id {}", dup.record_id)));
        }
        sort_records(&mut records);
        Ok(MeasurementSet { records, sensors })
    }

    pub fn aircraft_ids(&self) -> BTreeSet<AircraftId> {
        self.records.iter().map(|r| r.aircraft_id).collect()
    }

    pub fn record_index(&self) -> HashMap<RecordId, usize> {
        self.records.iter().enumerate().map(|(i, r)| (r.record_id, i)).collect()
    }

    /// Records that carry a truth position (usable as opportunity traffic).
    pub fn training_records(&self) -> impl Iterator<Item = &MeasurementRecord> {
        self.records.iter().filter(|r| r.truth.is_some())
    }

    /// Records without a position, i.e. the ones to predict.
    pub fn maskable_records(&self) -> impl Iterator<Item = &MeasurementRecord> {
        self.records.iter().filter(|r| r.truth.is_none())
    }

    /// Smallest timestamp in the set, used as the integer time origin.
    pub fn min_toa_ns(&self) -> Option<i64> {
        self.records.iter().flat_map(|r| r.receptions.iter().map(|x| x.toa_ns)).min()
    }
}

fn sort_records(records: &mut [MeasurementRecord]) {
    records.sort_by(|a, b| {
        a.server_time
            .total_cmp(&b.server_time)
            .then(a.record_id.cmp(&b.record_id))
    });
}

/// Outcome of [`load_measurements`].
#[derive(Debug, Clone)]
pub struct LoadedMeasurements {
    pub set: MeasurementSet,
    /// Receptions dropped because their sensor is not in the table.
    pub dropped_receptions: usize,
    /// Records dropped because no reception survived.
    pub dropped_records: usize,
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn opt_f64(field: &str, path: &Path, line: u64, name: &str) -> Result<Option<f64>, DataError> {
    let f = field.trim();
    if f.is_empty() {
        return Ok(None);
    }
    f.parse::<f64>()
        .map(Some)
        .map_err(|e| parse_err(path, line, format!("{name}: {e}")))
}

fn req<T: std::str::FromStr>(field: &str, path: &Path, line: u64, name: &str) -> Result<T, DataError>
where
    T::Err: std::fmt::Display,
{
    field
        .trim()
        .parse::<T>()
        .map_err(|e| parse_err(path, line, format!("{name}: {e}")))
}

fn open_csv(path: &Path) -> Result<(csv::Reader<File>, csv::StringRecord), DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(file);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    Ok((rdr, header))
}

fn column_map(header: &csv::StringRecord, expected: &[&str], path: &Path) -> Result<Vec<usize>, DataError> {
    expected
        .iter()
        .map(|name| {
            header
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| parse_err(path, 1, format!("missing column '{name}'")))
        })
        .collect()
}

pub fn load_sensors(path: impl AsRef<Path>) -> Result<SensorTable, DataError> {
    let path = path.as_ref();
    let (mut rdr, header) = open_csv(path)?;
    let cols = column_map(&header, &SENSOR_HEADER, path)?;
    let mut table = SensorTable::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let id: SensorId = req(&row[cols[0]], path, line, "serial")?;
        let lat: f64 = req(&row[cols[1]], path, line, "latitude")?;
        let lon: f64 = req(&row[cols[2]], path, line, "longitude")?;
        let h: f64 = req(&row[cols[3]], path, line, "height")?;
        let position = GeodeticPosition::new(lat, lon, h).map_err(|e| parse_err(path, line, e.to_string()))?;
        table.insert(Sensor::new(id, position, row[cols[4]].trim()))?;
    }
    Ok(table)
}

pub fn write_sensors(table: &SensorTable, path: impl AsRef<Path>) -> Result<(), DataError> {
    atomic_write(path.as_ref(), |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(SENSOR_HEADER)?;
        for s in table.iter() {
            wtr.write_record([
                s.sensor_id.to_string(),
                s.position.latitude.to_string(),
                s.position.longitude.to_string(),
                s.position.altitude.to_string(),
                s.sensor_type.clone(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    })
}

pub fn load_measurements(path: impl AsRef<Path>, sensors: &SensorTable) -> Result<LoadedMeasurements, DataError> {
    let path = path.as_ref();
    let (mut rdr, header) = open_csv(path)?;
    let cols = column_map(&header, &MEASUREMENT_HEADER, path)?;
    let mut records = Vec::new();
    let mut dropped_receptions = 0;
    let mut dropped_records = 0;
    let mut unknown: BTreeSet<SensorId> = BTreeSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let record_id: RecordId = req(&row[cols[0]], path, line, "id")?;
        let server_time: f64 = req(&row[cols[1]], path, line, "timeAtServer")?;
        let aircraft_id: AircraftId = req(&row[cols[2]], path, line, "aircraft")?;
        let lat = opt_f64(&row[cols[3]], path, line, "latitude")?;
        let lon = opt_f64(&row[cols[4]], path, line, "longitude")?;
        let baro_altitude = opt_f64(&row[cols[5]], path, line, "baroAltitude")?;
        let geo_altitude = opt_f64(&row[cols[6]], path, line, "geoAltitude")?;
        let triples: Vec<(SensorId, i64, f64)> = serde_json::from_str(row[cols[8]].trim())
            .map_err(|e| parse_err(path, line, format!("measurements: {e}")))?;
        let declared: usize = req(&row[cols[7]], path, line, "numMeasurements")?;
        if declared != triples.len() {
            return Err(parse_err(
                path,
                line,
                format!("numMeasurements {declared} but {} measurements listed", triples.len()),
            ));
        }
        let truth = match (lat, lon, geo_altitude.or(baro_altitude)) {
            (Some(la), Some(lo), Some(alt)) => {
                Some(GeodeticPosition::new(la, lo, alt).map_err(|e| parse_err(path, line, e.to_string()))?)
            }
            (Some(_), Some(_), None) => {
                log::warn!("{}:{line}: position without altitude treated as unknown", path.display());
                None
            }
            (None, None, _) => None,
            _ => return Err(parse_err(path, line, "latitude and longitude must both be present or both empty")),
        };
        let mut receptions = Vec::with_capacity(triples.len());
        for (sensor_id, toa_ns, rssi) in triples {
            if !sensors.contains(sensor_id) {
                dropped_receptions += 1;
                unknown.insert(sensor_id);
                continue;
            }
            receptions.push(Reception { sensor_id, toa_ns, rssi });
        }
        if receptions.is_empty() {
            dropped_records += 1;
            continue;
        }
        let rec = MeasurementRecord {
            record_id,
            aircraft_id,
            server_time,
            truth,
            baro_altitude,
            receptions,
        };
        rec.validate().map_err(|e| parse_err(path, line, e.to_string()))?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    if !unknown.is_empty() {
        log::warn!(
            "{}: dropped {dropped_receptions} receptions from {} unknown sensors",
            path.display(),
            unknown.len()
        );
    }
    let set = MeasurementSet::new(records, sensors.clone())?;
    Ok(LoadedMeasurements {
        set,
        dropped_receptions,
        dropped_records,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_measurements(set: &MeasurementSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    atomic_write(path.as_ref(), |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(MEASUREMENT_HEADER)?;
        let mut json = String::new();
        for r in &set.records {
            json.clear();
            json.push('[');
            for (i, m) in r.receptions.iter().enumerate() {
                if i > 0 {
                    json.push(',');
                }
                json.push_str(&format!("[{},{},{}]", m.sensor_id, m.toa_ns, fmt_json_f64(m.rssi)));
            }
            json.push(']');
            wtr.write_record([
                r.record_id.to_string(),
                r.server_time.to_string(),
                r.aircraft_id.to_string(),
                fmt_opt(r.truth.map(|t| t.latitude)),
                fmt_opt(r.truth.map(|t| t.longitude)),
                fmt_opt(r.baro_altitude),
                fmt_opt(r.truth.map(|t| t.altitude)),
                r.receptions.len().to_string(),
                json.clone(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    })
}

/// Shortest round-trip float text that is also valid JSON.
fn fmt_json_f64(v: f64) -> String {
    serde_json::to_string(&v).unwrap_or_else(|_| "null".into())
}

/// Hides the truth of `round(fraction * flights)` randomly chosen flights.
/// Returns the masked set and the withheld positions.
pub fn mask_flights(set: &MeasurementSet, fraction: f64, seed: u64) -> Result<(MeasurementSet, PredictionSet), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::InvalidArgument(format!("fraction {fraction} outside (0, 1)")));
    }
    let flights: Vec<AircraftId> = set.aircraft_ids().into_iter().collect();
    if flights.is_empty() {
        return Err(DataError::InvalidArgument("no flights to mask".into()));
    }
    let k = (fraction * flights.len() as f64).round() as usize;
    let chosen = choose_flights(&flights, k, seed);
    let mut truth = PredictionSet::default();
    let mut records = set.records.clone();
    for r in records.iter_mut().filter(|r| chosen.contains(&r.aircraft_id)) {
        if let Some(t) = r.truth.take() {
            truth.insert(r.record_id, t);
        }
    }
    Ok((
        MeasurementSet {
            records,
            sensors: set.sensors.clone(),
        },
        truth,
    ))
}

/// Deterministic choice of `k` flights from a sorted list.
pub fn choose_flights(flights: &[AircraftId], k: usize, seed: u64) -> BTreeSet<AircraftId> {
    let mut sorted = flights.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    sorted.into_iter().take(k).collect()
}

/// Writes one row per maskable record of `masked`; unpredicted rows carry empty fields.
pub fn write_submission(preds: &PredictionSet, masked: &MeasurementSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    let maskable: BTreeSet<RecordId> = masked.maskable_records().map(|r| r.record_id).collect();
    if let Some(bad) = preds.ids().find(|id| !maskable.contains(id)) {
        return Err(DataError::Integrity(format!("prediction for record {bad} which is not masked")));
    }
    atomic_write(path.as_ref(), |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(SUBMISSION_HEADER)?;
        for id in &maskable {
            write_prediction_row(&mut wtr, *id, preds.get(*id))?;
        }
        wtr.flush()?;
        Ok(())
    })
}

/// Writes every entry of a prediction set (e.g. withheld truth) in submission format.
pub fn write_predictions(preds: &PredictionSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    atomic_write(path.as_ref(), |w| {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(SUBMISSION_HEADER)?;
        for (id, p) in preds.iter() {
            write_prediction_row(&mut wtr, id, Some(p))?;
        }
        wtr.flush()?;
        Ok(())
    })
}

fn write_prediction_row<W: Write>(wtr: &mut csv::Writer<W>, id: RecordId, p: Option<&GeodeticPosition>) -> std::io::Result<()> {
    let row = match p {
        Some(p) => [id.to_string(), p.latitude.to_string(), p.longitude.to_string(), p.altitude.to_string()],
        None => [id.to_string(), String::new(), String::new(), String::new()],
    };
    wtr.write_record(row).map_err(std::io::Error::other)
}

pub fn read_submission(path: impl AsRef<Path>) -> Result<PredictionSet, DataError> {
    let path = path.as_ref();
    let (mut rdr, header) = open_csv(path)?;
    let cols = column_map(&header, &SUBMISSION_HEADER, path)?;
    let mut preds = PredictionSet::default();
    let mut seen = BTreeSet::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let id: RecordId = req(&row[cols[0]], path, line, "id")?;
        if !seen.insert(id) {
            return Err(DataError::Integrity(format!("{}: record {id} listed twice", path.display())));
        }
        let lat = opt_f64(&row[cols[1]], path, line, "latitude")?;
        let lon = opt_f64(&row[cols[2]], path, line, "longitude")?;
        let alt = opt_f64(&row[cols[3]], path, line, "geoAltitude")?;
        match (lat, lon, alt) {
            (None, None, None) => {}
            (Some(la), Some(lo), Some(al)) => {
                // Non-finite or out-of-range coordinates count as no prediction.
                if let Ok(p) = GeodeticPosition::new(la, lo, al) {
                    preds.insert(id, p);
                }
            }
            _ => return Err(parse_err(path, line, "partially filled prediction row")),
        }
    }
    Ok(preds)
}

/// Writes through a temporary sibling file and renames it into place, so a
/// failed write never leaves a partial file behind.
pub fn atomic_write<F>(path: &Path, body: F) -> Result<(), DataError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let file_name = path
        .file_name()
        .ok_or_else(|| DataError::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = (|| {
        let file = File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Integrity(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;


    fn write_file(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const SENSORS: &str = "serial,latitude,longitude,height,type\n\
        1,47.0,8.0,400,GRX1090\n\
        2,47.5,8.5,300.5,dump1090\n\
        3,46.8,7.5,512,Radarcape\n";

    #[test]
    fn loads_sensor_table() {
        let dir = tempfile::tempdir().unwrap();
        let t = load_sensors(write_file(dir.path(), "s.csv", SENSORS)).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.get(1).unwrap().synchronized);
        assert!(!t.get(2).unwrap().synchronized);
        assert!(t.get(3).unwrap().synchronized);
        assert_eq!(t.get(2).unwrap().position.altitude, 300.5);
    }

    #[test]
    fn duplicate_sensor_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{SENSORS}2,40,1,0,dump1090\n");
        let err = load_sensors(write_file(dir.path(), "s.csv", &body)).unwrap_err();
        assert!(matches!(err, DataError::Integrity(_)), "{err}");
    }

    #[test]
    fn malformed_sensor_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let body = "serial,latitude,longitude,height,type\n1,47,8,0,x\n2,abc,8,0,x\n";
        match load_sensors(write_file(dir.path(), "s.csv", body)).unwrap_err() {
            DataError::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("unexpected {e}"),
        }
    }

    const MEAS: &str = "id,timeAtServer,aircraft,latitude,longitude,baroAltitude,geoAltitude,numMeasurements,measurements\n\
        10,1.5,7,47.1,8.1,9000,9050.5,2,\"[[1,1000000,-40.5],[2,1000100,-50]]\"\n\
        11,1.0,7,,,9000,,3,\"[[1,2000000,-40],[3,2000200,-41],[9,2000300,-42]]\"\n";

    #[test]
    fn loads_measurements_and_drops_unknown_sensors() {
        let dir = tempfile::tempdir().unwrap();
        let sensors = load_sensors(write_file(dir.path(), "s.csv", SENSORS)).unwrap();
        let loaded = load_measurements(write_file(dir.path(), "m.csv", MEAS), &sensors).unwrap();
        assert_eq!(loaded.set.records.len(), 2);
        assert_eq!(loaded.dropped_receptions, 1);
        // sorted by server time
        assert_eq!(loaded.set.records[0].record_id, 11);
        assert!(loaded.set.records[0].truth.is_none());
        let r = &loaded.set.records[1];
        assert_eq!(r.truth.unwrap().altitude, 9050.5);
        assert_eq!(r.receptions[1].toa_ns, 1000100);
        assert_eq!(r.receptions[1].rssi, -50.0);
    }

    #[test]
    fn empty_measurement_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let sensors = load_sensors(write_file(dir.path(), "s.csv", SENSORS)).unwrap();
        let p = write_file(dir.path(), "m.csv", &MEASUREMENT_HEADER.join(","));
        assert!(matches!(load_measurements(p, &sensors), Err(DataError::Empty(_))));
        let p = write_file(dir.path(), "bad.csv", "id,foo\n1,2\n");
        assert!(matches!(load_measurements(p, &sensors), Err(DataError::Parse { .. })));
    }

    #[test]
    fn measurements_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sensors = load_sensors(write_file(dir.path(), "s.csv", SENSORS)).unwrap();
        let set = load_measurements(write_file(dir.path(), "m.csv", MEAS), &sensors).unwrap().set;
        let out = dir.path().join("out.csv");
        write_measurements(&set, &out).unwrap();
        let back = load_measurements(&out, &sensors).unwrap();
        assert_eq!(back.set, set);
        assert_eq!(back.dropped_receptions, 0);
    }

    fn toy_set(flights: u64, per_flight: u64) -> MeasurementSet {
        let sensors: SensorTable = (1..=3)
            .map(|i| Sensor::new(i, GeodeticPosition::new(47.0, 8.0 + i as f64 * 0.1, 0.0).unwrap(), "GRX1090"))
            .collect();
        let mut records = Vec::new();
        for f in 0..flights {
            for k in 0..per_flight {
                let id = f * 1000 + k;
                records.push(MeasurementRecord {
                    record_id: id,
                    aircraft_id: 100 + f,
                    server_time: k as f64 + f as f64 * 0.01,
                    truth: Some(GeodeticPosition::new(47.2, 8.1 + k as f64 * 1e-3, 9000.0).unwrap()),
                    baro_altitude: Some(8990.0),
                    receptions: vec![Reception { sensor_id: 1, toa_ns: 1_000 + id as i64, rssi: -1.0 }],
                });
            }
        }
        MeasurementSet::new(records, sensors).unwrap()
    }

    #[test]
    fn masks_whole_flights_deterministically() {
        let set = toy_set(10, 5);
        let (m1, t1) = mask_flights(&set, 0.1, 42).unwrap();
        let (m2, t2) = mask_flights(&set, 0.1, 42).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(t1, t2);
        assert_eq!(t1.len(), 5);
        let masked_flights: BTreeSet<_> = m1.maskable_records().map(|r| r.aircraft_id).collect();
        assert_eq!(masked_flights.len(), 1);
        // barometric altitude survives masking
        assert!(m1.maskable_records().all(|r| r.baro_altitude == Some(8990.0)));
        // reconstruct
        let mut rebuilt = m1.clone();
        for r in rebuilt.records.iter_mut() {
            if let Some(p) = t1.get(r.record_id) {
                r.truth = Some(*p);
            }
        }
        assert_eq!(rebuilt, set);
        assert!(mask_flights(&set, 0.0, 1).is_err());
        assert!(mask_flights(&set, 1.0, 1).is_err());
    }

    #[test]
    fn submission_round_trip_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let set = toy_set(4, 3);
        let (masked, truth) = mask_flights(&set, 0.5, 3).unwrap();
        let p = dir.path().join("sub.csv");
        write_submission(&PredictionSet::default(), &masked, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1 + truth.len());
        assert!(read_submission(&p).unwrap().is_empty());

        write_submission(&truth, &masked, &p).unwrap();
        assert_eq!(read_submission(&p).unwrap(), truth);

        let mut bad = PredictionSet::default();
        let unmasked = masked.training_records().next().unwrap().record_id;
        bad.insert(unmasked, GeodeticPosition::new(1.0, 1.0, 1.0).unwrap());
        assert!(matches!(write_submission(&bad, &masked, &p), Err(DataError::Integrity(_))));
    }
}
