//! Track post-processing: speed-feasibility filtering, local quadratic
//! reconstruction, spline-based error screening and short-gap filling.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataio::{AircraftId, MeasurementSet, RecordId};
use crate::geo::{self, GeodeticPosition};
use crate::robust::median;
use crate::spline::{add_difference_penalty, solve_spd, UniformKnots, UniformSpline};

pub const MAX_SPEED_M_S: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointSource {
    Solved,
    Reconstructed,
    GapFilled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub record_id: RecordId,
    /// Emission time, seconds on the common timebase.
    pub aircraft_time: f64,
    pub position: GeodeticPosition,
    pub source: PointSource,
    /// Estimated horizontal error in meters, when known.
    pub est_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub aircraft_id: AircraftId,
    pub points: Vec<TrackPoint>,
}

impl Track {
    /// Sorts by time and drops points whose time repeats an earlier one.
    pub fn new(aircraft_id: AircraftId, mut points: Vec<TrackPoint>) -> Self {
        points.retain(|p| p.aircraft_time.is_finite());
        points.sort_by(|a, b| a.aircraft_time.total_cmp(&b.aircraft_time).then(a.record_id.cmp(&b.record_id)));
        points.dedup_by(|b, a| b.aircraft_time <= a.aircraft_time);
        Track { aircraft_id, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Largest ground speed between consecutive points.
    pub fn max_speed(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| speed(&w[0], &w[1]))
            .fold(0.0, f64::max)
    }
}

/// Ground speed between two points; infinite when the time does not advance.
pub fn speed(a: &TrackPoint, b: &TrackPoint) -> f64 {
    let dt = b.aircraft_time - a.aircraft_time;
    let d = geo::ground_distance(&a.position, &b.position);
    if dt > 0.0 {
        d / dt
    } else if d == 0.0 && dt == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub retained: Vec<TrackPoint>,
    pub removed: Vec<TrackPoint>,
}

/// Longest time-monotone chain whose consecutive members respect the speed
/// bound. Ties prefer the earlier predecessor and then the earlier endpoint.
pub fn velocity_graph_filter(points: &[TrackPoint], max_speed: f64) -> FilterResult {
    let n = points.len();
    if n <= 1 {
        return FilterResult {
            retained: points.to_vec(),
            removed: Vec::new(),
        };
    }
    let mut best = vec![1usize; n];
    let mut prev = vec![usize::MAX; n];
    for j in 1..n {
        for i in 0..j {
            if best[i] + 1 > best[j] && speed(&points[i], &points[j]) <= max_speed {
                best[j] = best[i] + 1;
                prev[j] = i;
            }
        }
    }
    let mut end = 0;
    for j in 1..n {
        if best[j] > best[end] {
            end = j;
        }
    }
    let mut keep = vec![false; n];
    let mut k = end;
    loop {
        keep[k] = true;
        if prev[k] == usize::MAX {
            break;
        }
        k = prev[k];
    }
    let (mut retained, mut removed) = (Vec::with_capacity(best[end]), Vec::new());
    for (p, kept) in points.iter().zip(keep) {
        if kept {
            retained.push(*p);
        } else {
            removed.push(*p);
        }
    }
    FilterResult { retained, removed }
}

/// A record to place on the reconstructed track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackTarget {
    pub record_id: RecordId,
    pub aircraft_time: f64,
    /// Geometric altitude to assign (barometric plus offset), if known.
    pub altitude: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructOptions {
    /// Full width of the neighborhood, seconds.
    pub window_s: f64,
    pub min_points: usize,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            window_s: 30.0,
            min_points: 5,
        }
    }
}

/// Longitude continuous with `reference` (no jump across the antimeridian).
fn unwrap_lon(lon: f64, reference: f64) -> f64 {
    let mut d = lon - reference;
    while d > 180.0 {
        d -= 360.0;
    }
    while d < -180.0 {
        d += 360.0;
    }
    reference + d
}

fn wrap_lon(lon: f64) -> f64 {
    let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if l >= 180.0 {
        l - 360.0
    } else {
        l
    }
}

/// Value at `t` of the least-squares parabola through `(ts, ys)`; time is
/// centered on `t` for conditioning.
fn quadratic_at(t: f64, ts: &[f64], ys: &[[f64; 2]]) -> Option<[f64; 2]> {
    let mut a = Matrix3::<f64>::zeros();
    let mut b = [Vector3::<f64>::zeros(); 2];
    for (ti, yi) in ts.iter().zip(ys) {
        let u = ti - t;
        let row = Vector3::new(1.0, u, u * u);
        a += row * row.transpose();
        for c in 0..2 {
            b[c] += row * yi[c];
        }
    }
    let chol = a.cholesky()?;
    let out = [chol.solve(&b[0])[0], chol.solve(&b[1])[0]];
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Replaces every target with the value of order-2 polynomials in time
/// (latitude and longitude separately) fitted to the solved points within
/// the surrounding window. Targets whose window holds fewer than
/// `min_points` solved points keep their solved position when they have
/// one and are otherwise left out.
pub fn local_quadratic_reconstruct(track: &Track, targets: &[TrackTarget], opts: &ReconstructOptions) -> Track {
    let solved: Vec<&TrackPoint> = track.points.iter().filter(|p| p.source == PointSource::Solved).collect();
    let times: Vec<f64> = solved.iter().map(|p| p.aircraft_time).collect();
    let lon_ref = solved.first().map_or(0.0, |p| p.position.longitude);
    let half = 0.5 * opts.window_s;
    let mut out = Vec::with_capacity(targets.len());
    let existing: std::collections::HashMap<RecordId, &TrackPoint> = track.points.iter().map(|p| (p.record_id, p)).collect();
    for tgt in targets {
        let lo = times.partition_point(|t| *t < tgt.aircraft_time - half);
        let hi = times.partition_point(|t| *t <= tgt.aircraft_time + half);
        let fitted = if hi - lo >= opts.min_points.max(3) {
            let ys: Vec<[f64; 2]> = solved[lo..hi]
                .iter()
                .map(|p| [p.position.latitude, unwrap_lon(p.position.longitude, lon_ref)])
                .collect();
            quadratic_at(tgt.aircraft_time, &times[lo..hi], &ys)
        } else {
            None
        };
        match fitted {
            Some([lat, lon]) if (-90.0..=90.0).contains(&lat) => {
                let altitude = tgt.altitude.unwrap_or_else(|| {
                    let alts: Vec<f64> = solved[lo..hi].iter().map(|p| p.position.altitude).collect();
                    median(&alts).unwrap_or(0.0)
                });
                out.push(TrackPoint {
                    record_id: tgt.record_id,
                    aircraft_time: tgt.aircraft_time,
                    position: GeodeticPosition {
                        latitude: lat,
                        longitude: wrap_lon(lon),
                        altitude,
                    },
                    source: PointSource::Reconstructed,
                    est_error: None,
                });
            }
            _ => {
                if let Some(p) = existing.get(&tgt.record_id) {
                    out.push(**p);
                }
            }
        }
    }
    // solved points that were not targets are kept untouched
    let targeted: std::collections::HashSet<RecordId> = targets.iter().map(|t| t.record_id).collect();
    out.extend(track.points.iter().filter(|p| !targeted.contains(&p.record_id)).copied());
    Track::new(track.aircraft_id, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineOptions {
    pub degree: usize,
    pub knot_spacing_s: f64,
    /// Gaps longer than this split the track into independent segments.
    pub max_gap_s: f64,
    pub min_points: usize,
    /// Difference-penalty weight, relative to the mean data weight. The
    /// penalty order is `degree + 1`, so polynomials of the spline degree are
    /// not penalized.
    pub smoothing: f64,
    pub irls_iterations: usize,
    /// Residual scale (m) below which points get full weight in the robust fit.
    pub robust_scale_m: f64,
}

impl Default for SplineOptions {
    fn default() -> Self {
        SplineOptions {
            degree: 5,
            knot_spacing_s: 10.0,
            max_gap_s: 60.0,
            min_points: 8,
            smoothing: 1e-4,
            irls_iterations: 8,
            robust_scale_m: 10.0,
        }
    }
}

/// Latitude/longitude splines of one contiguous segment.
#[derive(Debug, Clone)]
pub struct SegmentFit {
    pub start: usize,
    pub end: usize,
    pub lat: UniformSpline,
    pub lon: UniformSpline,
    lon_ref: f64,
}

impl SegmentFit {
    pub fn eval(&self, t: f64, altitude: f64) -> Option<GeodeticPosition> {
        let lat = self.lat.eval(t).ok()?;
        let lon = self.lon.eval(t).ok()?;
        Some(GeodeticPosition {
            latitude: lat.clamp(-90.0, 90.0),
            longitude: wrap_lon(lon + self.lon_ref),
            altitude,
        })
    }

    pub fn covers(&self, t: f64) -> bool {
        self.lat.knots.contains(t)
    }
}

/// Index ranges of segments split where consecutive points are more than `max_gap` apart.
pub fn segments(points: &[TrackPoint], max_gap: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=points.len() {
        if i == points.len() || points[i].aircraft_time - points[i - 1].aircraft_time > max_gap {
            if i > start {
                out.push((start, i));
            }
            start = i;
        }
    }
    out
}

/// Robust penalized spline fit of one segment; `None` when too short.
pub fn fit_segment(points: &[TrackPoint], start: usize, end: usize, opts: &SplineOptions) -> Option<SegmentFit> {
    let seg = &points[start..end];
    if seg.len() < opts.min_points.max(opts.degree + 1) {
        return None;
    }
    let t0 = seg[0].aircraft_time;
    let t1 = seg[seg.len() - 1].aircraft_time;
    let knots = UniformKnots::covering(opts.degree, t0, t1, opts.knot_spacing_s, 2).ok()?;
    let lon_ref = seg[0].position.longitude;
    let ts: Vec<f64> = seg.iter().map(|p| p.aircraft_time).collect();
    let lat: Vec<f64> = seg.iter().map(|p| p.position.latitude).collect();
    let lon: Vec<f64> = seg.iter().map(|p| unwrap_lon(p.position.longitude, lon_ref) - lon_ref).collect();
    let n = knots.n_coeffs();
    let basis: Vec<(usize, [f64; 6])> = ts.iter().map(|t| knots.basis(*t)).collect::<Result<_, _>>().ok()?;
    let mut w = vec![1.0; seg.len()];
    let mut fits = None;
    for _ in 0..opts.irls_iterations.max(1) {
        let mut ata = DMatrix::<f64>::zeros(n, n);
        let mut b_lat = DVector::<f64>::zeros(n);
        let mut b_lon = DVector::<f64>::zeros(n);
        for (i, (first, b)) in basis.iter().enumerate() {
            for r in 0..=opts.degree {
                b_lat[first + r] += w[i] * b[r] * lat[i];
                b_lon[first + r] += w[i] * b[r] * lon[i];
                for c in 0..=opts.degree {
                    ata[(first + r, first + c)] += w[i] * b[r] * b[c];
                }
            }
        }
        let mean_w = w.iter().sum::<f64>() / n as f64;
        add_difference_penalty(&mut ata, 0, n, opts.degree + 1, opts.smoothing * mean_w);
        let c_lat = solve_spd(ata.clone(), b_lat)?;
        let c_lon = solve_spd(ata, b_lon)?;
        let s_lat = UniformSpline::new(knots, c_lat.iter().copied().collect()).ok()?;
        let s_lon = UniformSpline::new(knots, c_lon.iter().copied().collect()).ok()?;
        let fit = SegmentFit {
            start,
            end,
            lat: s_lat,
            lon: s_lon,
            lon_ref,
        };
        for (i, p) in seg.iter().enumerate() {
            let r = fit
                .eval(p.aircraft_time, p.position.altitude)
                .map_or(f64::INFINITY, |q| geo::ground_distance(&p.position, &q));
            w[i] = 1.0 / r.max(opts.robust_scale_m);
        }
        fits = Some(fit);
    }
    fits
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenResult {
    pub track: Track,
    pub removed: Vec<TrackPoint>,
    /// Points in segments too short to fit (left without an error estimate).
    pub unscreened: usize,
}

/// Annotates each point with its distance to a robust quintic spline through
/// its segment and removes the `1 - keep_fraction` share with the largest
/// distance, never keeping fewer than `min_keep` points.
pub fn spline_error_screen(track: &Track, keep_fraction: f64, min_keep: usize, opts: &SplineOptions) -> ScreenResult {
    let mut points = track.points.clone();
    let mut unscreened = 0;
    for (s, e) in segments(&points, opts.max_gap_s) {
        match fit_segment(&points, s, e, opts) {
            Some(fit) => {
                for p in &mut points[s..e] {
                    p.est_error = fit
                        .eval(p.aircraft_time, p.position.altitude)
                        .map(|q| geo::ground_distance(&p.position, &q));
                }
            }
            None => {
                unscreened += e - s;
                log::debug!("track {}: segment of {} points too short to screen", track.aircraft_id, e - s);
            }
        }
    }
    let n = points.len();
    let quota = ((1.0 - keep_fraction.clamp(0.0, 1.0)) * n as f64).round() as usize;
    let quota = quota.min(n.saturating_sub(min_keep));
    let mut order: Vec<usize> = (0..n).filter(|i| points[*i].est_error.is_some()).collect();
    order.sort_by(|a, b| {
        points[*b].est_error.unwrap().total_cmp(&points[*a].est_error.unwrap()).then(a.cmp(b))
    });
    let drop: std::collections::HashSet<usize> = order.into_iter().take(quota).collect();
    let (mut kept, mut removed) = (Vec::with_capacity(n), Vec::new());
    for (i, p) in points.into_iter().enumerate() {
        if drop.contains(&i) {
            removed.push(p);
        } else {
            kept.push(p);
        }
    }
    ScreenResult {
        track: Track {
            aircraft_id: track.aircraft_id,
            points: kept,
        },
        removed,
        unscreened,
    }
}

/// Inserts spline predictions for targets that fall strictly inside a gap of
/// at most `max_gap` seconds between consecutive track points.
pub fn fill_gaps(track: &Track, targets: &[TrackTarget], max_gap: f64, opts: &SplineOptions) -> Track {
    let pts = &track.points;
    if pts.len() < 2 {
        return track.clone();
    }
    let present: std::collections::HashSet<RecordId> = pts.iter().map(|p| p.record_id).collect();
    let seg_opts = SplineOptions {
        max_gap_s: max_gap,
        ..*opts
    };
    let fits: Vec<(usize, usize, Option<SegmentFit>)> = segments(pts, max_gap)
        .into_iter()
        .map(|(s, e)| (s, e, fit_segment(pts, s, e, &seg_opts)))
        .collect();
    let times: Vec<f64> = pts.iter().map(|p| p.aircraft_time).collect();
    let mut out = pts.clone();
    for tgt in targets {
        if present.contains(&tgt.record_id) {
            continue;
        }
        let t = tgt.aircraft_time;
        let k = times.partition_point(|x| *x <= t);
        if k == 0 || k == times.len() {
            continue;
        }
        let (a, b) = (&pts[k - 1], &pts[k]);
        if !(t > a.aircraft_time && t < b.aircraft_time) || b.aircraft_time - a.aircraft_time > max_gap {
            continue;
        }
        let altitude = tgt.altitude.unwrap_or(0.5 * (a.position.altitude + b.position.altitude));
        let from_spline = fits
            .iter()
            .find(|(s, e, _)| *s < k && k < *e)
            .and_then(|(_, _, f)| f.as_ref())
            .and_then(|f| f.eval(t, altitude));
        let position = from_spline.unwrap_or_else(|| {
            // too few points for a spline: linear interpolation
            let u = (t - a.aircraft_time) / (b.aircraft_time - a.aircraft_time);
            let lon_b = unwrap_lon(b.position.longitude, a.position.longitude);
            GeodeticPosition {
                latitude: a.position.latitude + u * (b.position.latitude - a.position.latitude),
                longitude: wrap_lon(a.position.longitude + u * (lon_b - a.position.longitude)),
                altitude,
            }
        });
        out.push(TrackPoint {
            record_id: tgt.record_id,
            aircraft_time: t,
            position,
            source: PointSource::GapFilled,
            est_error: None,
        });
    }
    Track::new(track.aircraft_id, out)
}

/// Constant offset from barometric to geometric altitude: median of
/// `truth altitude - baro altitude` over records that carry both.
pub fn baro_offset(set: &MeasurementSet) -> f64 {
    let d: Vec<f64> = set
        .training_records()
        .filter_map(|r| Some(r.truth?.altitude - r.baro_altitude?))
        .collect();
    median(&d).unwrap_or(0.0)
}

/// GeoJSON feature collection: the retained track as a LineString and every
/// point (retained or removed) as a Point tagged with its source.
pub fn track_geojson(track: &Track, removed: &[TrackPoint]) -> Value {
    let line: Vec<Value> = track
        .points
        .iter()
        .map(|p| json!([p.position.longitude, p.position.latitude, p.position.altitude]))
        .collect();
    let mut features = vec![json!({
        "type": "Feature",
        "geometry": {"type": "LineString", "coordinates": line},
        "properties": {"aircraft": track.aircraft_id},
    })];
    let point = |p: &TrackPoint, status: &str| {
        json!({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [p.position.longitude, p.position.latitude, p.position.altitude]},
            "properties": {
                "record": p.record_id,
                "time": p.aircraft_time,
                "source": p.source,
                "status": status,
                "est_error": p.est_error,
            },
        })
    };
    features.extend(track.points.iter().map(|p| point(p, "retained")));
    features.extend(removed.iter().map(|p| point(p, "removed")));
    json!({"type": "FeatureCollection", "features": features})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(id: u64, t: f64, lat: f64, lon: f64) -> TrackPoint {
        TrackPoint {
            record_id: id,
            aircraft_time: t,
            position: GeodeticPosition {
                latitude: lat,
                longitude: lon,
                altitude: 9000.0,
            },
            source: PointSource::Solved,
            est_error: None,
        }
    }

    /// Straight eastbound track at `speed` m/s along 47 N.
    fn straight(n: usize, speed: f64) -> Vec<TrackPoint> {
        let base = GeodeticPosition::new(47.0, 8.0, 9000.0).unwrap();
        (0..n)
            .map(|i| {
                let p = geo::offset_horizontal(&base, speed * i as f64, 0.0);
                pt(i as u64, i as f64, p.latitude, p.longitude)
            })
            .collect()
    }

    #[test]
    fn filter_keeps_clean_track() {
        let pts = straight(50, 250.0);
        let r = velocity_graph_filter(&pts, MAX_SPEED_M_S);
        assert_eq!(r.retained.len(), 50);
        assert!(r.removed.is_empty());
    }

    #[test]
    fn filter_removes_teleport() {
        let mut pts = straight(50, 250.0);
        let far = geo::offset_horizontal(&pts[20].position, 0.0, 100e3);
        pts[20].position = far;
        let r = velocity_graph_filter(&pts, MAX_SPEED_M_S);
        assert_eq!(r.removed.len(), 1);
        assert_eq!(r.removed[0].record_id, 20);
    }

    #[test]
    fn filter_prefers_longer_branch() {
        // 10 points on one branch, 3 interleaved points on a branch 50 km away
        let a = straight(13, 200.0);
        let mut pts = Vec::new();
        for (i, p) in a.into_iter().enumerate() {
            if i % 4 == 2 && i < 12 {
                let mut q = p;
                q.position = geo::offset_horizontal(&p.position, 0.0, 50e3);
                pts.push(q);
            } else {
                pts.push(p);
            }
        }
        let r = velocity_graph_filter(&pts, MAX_SPEED_M_S);
        assert_eq!(r.retained.len(), 10);
        assert_eq!(r.removed.len(), 3);
        let again = velocity_graph_filter(&r.retained, MAX_SPEED_M_S);
        assert_eq!(again.retained, r.retained);
    }

    #[test]
    fn quadratic_reconstruction_is_exact_on_parabolas() {
        let lat = |t: f64| 47.0 + 1e-4 * t - 2e-7 * t * t;
        let lon = |t: f64| 8.0 - 3e-4 * t + 5e-8 * t * t;
        let pts: Vec<TrackPoint> = (0..60).filter(|i| i % 7 != 3).map(|i| pt(i, i as f64, lat(i as f64), lon(i as f64))).collect();
        let track = Track::new(1, pts);
        let targets: Vec<TrackTarget> = (0..60)
            .map(|i| TrackTarget {
                record_id: i,
                aircraft_time: i as f64,
                altitude: Some(8000.0),
            })
            .collect();
        let out = local_quadratic_reconstruct(&track, &targets, &ReconstructOptions::default());
        assert_eq!(out.len(), 60);
        for p in &out.points {
            let t = p.aircraft_time;
            assert!((p.position.latitude - lat(t)).abs() < 1e-9);
            assert!((p.position.longitude - lon(t)).abs() < 1e-9);
            assert_eq!(p.position.altitude, 8000.0);
            assert_eq!(p.source, PointSource::Reconstructed);
        }
    }

    #[test]
    fn sparse_window_is_untouched() {
        let track = Track::new(1, vec![pt(1, 0.0, 47.0, 8.0), pt(2, 100.0, 47.1, 8.0)]);
        let targets = [TrackTarget {
            record_id: 1,
            aircraft_time: 0.0,
            altitude: None,
        }];
        let out = local_quadratic_reconstruct(&track, &targets, &ReconstructOptions::default());
        assert_eq!(out.points, track.points);
    }

    #[test]
    fn screen_on_exact_quintic() {
        let lat = |t: f64| 47.0 + 1e-4 * t + 1e-12 * t.powi(5);
        let pts: Vec<TrackPoint> = (0..100).map(|i| pt(i, i as f64, lat(i as f64), 8.0 + 2e-4 * i as f64)).collect();
        let track = Track::new(3, pts);
        let r = spline_error_screen(&track, 1.0, 0, &SplineOptions::default());
        assert!(r.removed.is_empty());
        assert!(r.track.points.iter().all(|p| p.est_error.unwrap() < 1e-6), "{:?}", r.track.points.iter().map(|p| p.est_error).fold(None::<f64>, |a, b| Some(a.unwrap_or(0.0).max(b.unwrap()))));
    }

    #[test]
    fn screen_removes_displaced_points() {
        let mut pts = straight(100, 220.0);
        for k in [7, 33, 50, 71, 94] {
            pts[k].position = geo::offset_horizontal(&pts[k].position, 3000.0, 4000.0);
        }
        let r = spline_error_screen(&Track::new(3, pts), 0.95, 0, &SplineOptions::default());
        let mut ids: Vec<u64> = r.removed.iter().map(|p| p.record_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![7, 33, 50, 71, 94]);
    }

    #[test]
    fn gap_filling_respects_max_gap() {
        let pts = straight(200, 240.0);
        let kept: Vec<TrackPoint> = pts.iter().filter(|p| !(60..90).contains(&p.record_id) && !(120..190).contains(&p.record_id)).copied().collect();
        let track = Track::new(5, kept);
        let targets: Vec<TrackTarget> = pts
            .iter()
            .map(|p| TrackTarget {
                record_id: p.record_id,
                aircraft_time: p.aircraft_time,
                altitude: Some(9000.0),
            })
            .collect();
        let out = fill_gaps(&track, &targets, 60.0, &SplineOptions::default());
        let filled: Vec<&TrackPoint> = out.points.iter().filter(|p| p.source == PointSource::GapFilled).collect();
        assert_eq!(filled.len(), 30);
        for f in filled {
            let truth = &pts[f.record_id as usize];
            assert!(geo::ground_distance(&f.position, &truth.position) < 200.0);
        }
        let same = fill_gaps(&Track::new(5, pts.clone()), &targets, 60.0, &SplineOptions::default());
        assert_eq!(same.points, pts);
    }
}
