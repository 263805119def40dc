//! WGS84 geodesy and small geometric helpers shared by every stage.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS84 semi-minor axis in meters.
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

const MIN_ALTITUDE: f64 = -1_000.0;
const MAX_ALTITUDE: f64 = 100_000.0;
const MIN_ECEF_NORM: f64 = 6.2e6;
const MAX_ECEF_NORM: f64 = 6.6e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("invalid coordinate: {0}")]
    InvalidCoordinate(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Latitude/longitude in degrees, altitude in meters above the WGS84 ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPosition {
    pub latitude: f64,
    pub longitude: f64,
    pub altitude: f64,
}

impl GeodeticPosition {
    /// Validated constructor. Longitude 180 is folded to -180.
    pub fn new(latitude: f64, longitude: f64, altitude: f64) -> Result<Self, GeoError> {
        let longitude = if longitude == 180.0 { -180.0 } else { longitude };
        let p = GeodeticPosition {
            latitude,
            longitude,
            altitude,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.latitude.is_finite() && (-90.0..=90.0).contains(&self.latitude)) {
            return Err(GeoError::InvalidCoordinate(format!(
                "latitude {} outside [-90, 90]",
                self.latitude
            )));
        }
        if !(self.longitude.is_finite() && (-180.0..180.0).contains(&self.longitude)) {
            return Err(GeoError::InvalidCoordinate(format!(
                "longitude {} outside [-180, 180)",
                self.longitude
            )));
        }
        if !(self.altitude.is_finite()
            && self.altitude > MIN_ALTITUDE
            && self.altitude < MAX_ALTITUDE)
        {
            return Err(GeoError::InvalidCoordinate(format!(
                "altitude {} outside (-1000, 100000) m",
                self.altitude
            )));
        }
        Ok(())
    }

    pub fn to_ecef(&self) -> Result<EcefPosition, GeoError> {
        geodetic_to_ecef(self)
    }

    /// Same position with a different altitude (unchecked).
    pub fn with_altitude(self, altitude: f64) -> Self {
        GeodeticPosition { altitude, ..self }
    }
}

/// Earth-centered Earth-fixed Cartesian position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPosition {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefPosition {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        EcefPosition { x, y, z }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        EcefPosition::new(v.x, v.y, v.z)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn distance(&self, other: &EcefPosition) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    /// True when the norm lies in the on/near-Earth band.
    pub fn is_near_earth(&self) -> bool {
        let n = self.norm();
        n.is_finite() && (MIN_ECEF_NORM..=MAX_ECEF_NORM).contains(&n)
    }

    pub fn to_geodetic(&self) -> Result<GeodeticPosition, GeoError> {
        ecef_to_geodetic(self)
    }
}

pub fn geodetic_to_ecef(p: &GeodeticPosition) -> Result<EcefPosition, GeoError> {
    p.validate()?;
    Ok(geodetic_to_ecef_unchecked(p.latitude, p.longitude, p.altitude))
}

/// Plain conversion without range checks, for internal use on already-valid data.
pub(crate) fn geodetic_to_ecef_unchecked(lat_deg: f64, lon_deg: f64, alt: f64) -> EcefPosition {
    let (sin_lat, cos_lat) = lat_deg.to_radians().sin_cos();
    let (sin_lon, cos_lon) = lon_deg.to_radians().sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    EcefPosition {
        x: (n + alt) * cos_lat * cos_lon,
        y: (n + alt) * cos_lat * sin_lon,
        z: (n * (1.0 - WGS84_E2) + alt) * sin_lat,
    }
}

/// Bowring-seeded fixed-point iteration on the parametric latitude.
///
/// Converges to below 1e-12 rad within a handful of iterations for any point
/// in the near-Earth band.
pub fn ecef_to_geodetic(p: &EcefPosition) -> Result<GeodeticPosition, GeoError> {
    if !p.is_near_earth() {
        return Err(GeoError::InvalidCoordinate(format!(
            "ECEF norm {} m outside [6.2e6, 6.6e6]",
            p.norm()
        )));
    }
    let (lat, lon, alt) = ecef_to_geodetic_raw(p);
    let lon = if lon >= 180.0 { lon - 360.0 } else { lon };
    GeodeticPosition::new(lat, lon, alt)
}

/// Returns (lat deg, lon deg, alt m) without validation.
pub(crate) fn ecef_to_geodetic_raw(p: &EcefPosition) -> (f64, f64, f64) {
    let ep2 = WGS84_E2 / (1.0 - WGS84_E2);
    let rho = p.x.hypot(p.y);
    let lon = p.y.atan2(p.x);
    if rho < 1e-9 {
        let lat = if p.z >= 0.0 { 90.0 } else { -90.0 };
        return (lat, lon.to_degrees(), p.z.abs() - WGS84_B);
    }
    // Initial parametric latitude from Bowring.
    let mut beta = (WGS84_A * p.z).atan2(WGS84_B * rho);
    let mut lat = 0.0;
    for _ in 0..8 {
        let (sb, cb) = beta.sin_cos();
        lat = (p.z + ep2 * WGS84_B * sb * sb * sb).atan2(rho - WGS84_E2 * WGS84_A * cb * cb * cb);
        let next = ((1.0 - WGS84_F) * lat.sin()).atan2(lat.cos());
        if (next - beta).abs() < 1e-14 {
            beta = next;
            break;
        }
        beta = next;
    }
    let _ = beta;
    let (sin_lat, cos_lat) = lat.sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    // Height formula that stays accurate at all latitudes.
    let alt = rho * cos_lat + (p.z + WGS84_E2 * n * sin_lat) * sin_lat - n;
    (lat.to_degrees(), lon.to_degrees(), alt)
}

/// Component-wise weighted mean of a point cloud.
pub fn weighted_barycenter(points: &[EcefPosition], weights: &[f64]) -> Result<EcefPosition, GeoError> {
    if points.is_empty() {
        return Err(GeoError::InvalidArgument("no points".into()));
    }
    if points.len() != weights.len() {
        return Err(GeoError::InvalidArgument(format!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(GeoError::InvalidArgument("weights must be finite and non-negative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(GeoError::InvalidArgument("weights sum to zero".into()));
    }
    let acc = points
        .iter()
        .zip(weights)
        .fold(Vector3::zeros(), |acc, (p, w)| acc + p.to_vector() * *w);
    Ok(EcefPosition::from_vector(&(acc / total)))
}

/// Unit vectors (east, north, up) of the local tangent frame at a geodetic point.
pub fn enu_basis(lat_deg: f64, lon_deg: f64) -> [Vector3<f64>; 3] {
    let (sl, cl) = lat_deg.to_radians().sin_cos();
    let (so, co) = lon_deg.to_radians().sin_cos();
    [
        Vector3::new(-so, co, 0.0),
        Vector3::new(-sl * co, -sl * so, cl),
        Vector3::new(cl * co, cl * so, sl),
    ]
}

/// Meridional and prime-vertical radii of curvature at a latitude.
pub fn radii_of_curvature(lat_deg: f64) -> (f64, f64) {
    let s = lat_deg.to_radians().sin();
    let w = (1.0 - WGS84_E2 * s * s).sqrt();
    let n = WGS84_A / w;
    let m = WGS84_A * (1.0 - WGS84_E2) / (w * w * w);
    (m, n)
}

/// Horizontal distance on the ellipsoid between two latitude/longitude pairs.
///
/// Uses the local radii of curvature at the mid latitude, which is accurate to
/// well below a meter for separations of tens of kilometers.
pub fn ground_distance(a: &GeodeticPosition, b: &GeodeticPosition) -> f64 {
    let mid_lat = 0.5 * (a.latitude + b.latitude);
    let (m, n) = radii_of_curvature(mid_lat);
    let dlat = (b.latitude - a.latitude).to_radians();
    let mut dlon = b.longitude - a.longitude;
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    let north = m * dlat;
    let east = n * mid_lat.to_radians().cos() * dlon.to_radians();
    north.hypot(east)
}

/// Moves a point by east/north meters at fixed altitude.
pub fn offset_horizontal(p: &GeodeticPosition, east: f64, north: f64) -> GeodeticPosition {
    let (m, n) = radii_of_curvature(p.latitude);
    let lat = p.latitude + (north / (m + p.altitude)).to_degrees();
    let mut lon = p.longitude
        + (east / ((n + p.altitude) * p.latitude.to_radians().cos())).to_degrees();
    if lon >= 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    GeodeticPosition {
        latitude: lat,
        longitude: lon,
        altitude: p.altitude,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook conversion written independently: N from the eccentricity, with
    /// the polar coordinate computed through cos/sin of the reduced latitude.
    fn textbook_geodetic_to_ecef(lat: f64, lon: f64, h: f64) -> (f64, f64, f64) {
        let a = 6378137.0_f64;
        let f = 1.0 / 298.257223563_f64;
        let b = a * (1.0 - f);
        let phi = lat.to_radians();
        let lam = lon.to_radians();
        let n = a * a / (a * a * phi.cos().powi(2) + b * b * phi.sin().powi(2)).sqrt();
        (
            (n + h) * phi.cos() * lam.cos(),
            (n + h) * phi.cos() * lam.sin(),
            (b * b / (a * a) * n + h) * phi.sin(),
        )
    }

    #[test]
    fn equator_and_pole() {
        let e = geodetic_to_ecef(&GeodeticPosition::new(0.0, 0.0, 0.0).unwrap()).unwrap();
        assert!((e.x - 6378137.0).abs() < 1e-9 && e.y.abs() < 1e-9 && e.z.abs() < 1e-9);
        let p = geodetic_to_ecef(&GeodeticPosition::new(90.0, 0.0, 0.0).unwrap()).unwrap();
        assert!(p.x.abs() < 1e-6 && p.y.abs() < 1e-9);
        assert!((p.z - 6356752.314).abs() < 1e-3);

        let g = ecef_to_geodetic(&EcefPosition::new(6378137.0, 0.0, 0.0)).unwrap();
        assert!(g.latitude.abs() < 1e-12 && g.longitude.abs() < 1e-12 && g.altitude.abs() < 1e-6);
        let g = ecef_to_geodetic(&EcefPosition::new(0.0, 0.0, 6356752.314)).unwrap();
        assert!((g.latitude - 90.0).abs() < 1e-12);
        assert!(g.altitude.abs() < 1e-3);
    }

    #[test]
    fn matches_independent_conversion() {
        let (x, y, z) = textbook_geodetic_to_ecef(47.0, 8.0, 10000.0);
        let e = geodetic_to_ecef(&GeodeticPosition::new(47.0, 8.0, 10000.0).unwrap()).unwrap();
        assert!((e.x - x).abs() < 1e-6, "{} vs {}", e.x, x);
        assert!((e.y - y).abs() < 1e-6);
        assert!((e.z - z).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(GeodeticPosition::new(91.0, 0.0, 0.0).is_err());
        assert!(GeodeticPosition::new(0.0, 181.0, 0.0).is_err());
        assert!(GeodeticPosition::new(0.0, 0.0, 2e5).is_err());
        assert!(GeodeticPosition::new(f64::NAN, 0.0, 0.0).is_err());
        assert!(ecef_to_geodetic(&EcefPosition::new(0.0, 0.0, 0.0)).is_err());
        assert!(ecef_to_geodetic(&EcefPosition::new(1e7, 0.0, 0.0)).is_err());
        assert_eq!(GeodeticPosition::new(0.0, 180.0, 0.0).unwrap().longitude, -180.0);
    }

    #[test]
    fn barycenter_cases() {
        let p = EcefPosition::new(1.0, 2.0, 3.0);
        assert_eq!(weighted_barycenter(&[p], &[7.0]).unwrap(), p);
        let a = EcefPosition::new(1.0, 0.0, 0.0);
        let b = EcefPosition::new(3.0, 0.0, 0.0);
        assert_eq!(weighted_barycenter(&[a, b], &[1.0, 1.0]).unwrap(), EcefPosition::new(2.0, 0.0, 0.0));
        let c = weighted_barycenter(&[a, b], &[1.0, 3.0]).unwrap();
        assert!((c.x - 2.5).abs() < 1e-15 && c.y == 0.0 && c.z == 0.0);
        assert!(weighted_barycenter(&[], &[]).is_err());
        assert!(weighted_barycenter(&[a, b], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn ground_distance_one_degree_of_latitude() {
        let a = GeodeticPosition::new(45.0, 7.0, 0.0).unwrap();
        let b = GeodeticPosition::new(45.01, 7.0, 0.0).unwrap();
        // meridian arc of 0.01 deg at 45 deg: M * dphi
        let (m, _) = radii_of_curvature(45.005);
        assert!((ground_distance(&a, &b) - m * 0.01_f64.to_radians()).abs() < 1e-9);
        let c = offset_horizontal(&a, 1000.0, -500.0);
        assert!((ground_distance(&a, &c) - 1000f64.hypot(500.0)).abs() < 0.05);
    }
}
