//! Spherical geodesy: great-circle distance, GPS error distance, routes and
//! station-to-station track length.
//!
//! Coordinates cross the API in decimal degrees and are converted to radians
//! internally.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const MEAN_EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90] or not finite")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180] or not finite")]
    Longitude(f64),
    #[error("earth radius must be positive and finite, got {0}")]
    Radius(f64),
    #[error("route {route} needs at least two polyline points")]
    ShortPolyline { route: String },
    #[error("route {route} has identical consecutive points at index {index}")]
    DuplicatePoint { route: String, index: usize },
    #[error("route {route}: station indices must be strictly increasing and inside the polyline")]
    StationIndex { route: String },
    #[error("unknown station {0}")]
    UnknownStation(String),
}

/// A WGS-84 position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat_deg: f64,
    lon_deg: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat_deg: f64,
    lon_deg: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GeoError;
    fn try_from(raw: RawPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(raw.lat_deg, raw.lon_deg)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint {
            lat_deg: p.lat_deg,
            lon_deg: p.lon_deg,
        }
    }
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self, GeoError> {
        if !lat_deg.is_finite() || !(-90.0..=90.0).contains(&lat_deg) {
            return Err(GeoError::Latitude(lat_deg));
        }
        if !lon_deg.is_finite() || !(-180.0..=180.0).contains(&lon_deg) {
            return Err(GeoError::Longitude(lon_deg));
        }
        Ok(GeoPoint { lat_deg, lon_deg })
    }

    pub fn lat_deg(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon_deg(&self) -> f64 {
        self.lon_deg
    }
}

/// A sphere of fixed radius used for every distance computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarthModel {
    radius_m: f64,
}

impl EarthModel {
    pub fn new(radius_m: f64) -> Result<Self, GeoError> {
        if !radius_m.is_finite() || radius_m <= 0.0 {
            return Err(GeoError::Radius(radius_m));
        }
        Ok(EarthModel { radius_m })
    }

    pub fn radius_m(&self) -> f64 {
        self.radius_m
    }

    /// Length of one degree of arc along a great circle.
    pub fn meters_per_degree(&self) -> f64 {
        self.radius_m * std::f64::consts::PI / 180.0
    }
}

impl Default for EarthModel {
    fn default() -> Self {
        EarthModel {
            radius_m: MEAN_EARTH_RADIUS_M,
        }
    }
}

/// Timestamped position reported by one vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsFix {
    pub vehicle_id: String,
    pub point: GeoPoint,
    pub timestamp_ms: u64,
    pub seq: u64,
}

/// Haversine great-circle distance in meters.
///
/// The square-root operand is clamped into `[0, 1]` so that rounding near
/// antipodal pairs never produces a NaN from `asin`.
pub fn haversine_distance(a: GeoPoint, b: GeoPoint, earth: EarthModel) -> f64 {
    let lat1 = a.lat_deg.to_radians();
    let lat2 = b.lat_deg.to_radians();
    let dlat = lat2 - lat1;
    let dlon = (b.lon_deg - a.lon_deg).to_radians();

    let sin_dlat = (dlat / 2.0).sin();
    let sin_dlon = (dlon / 2.0).sin();
    let h = sin_dlat * sin_dlat + lat1.cos() * lat2.cos() * sin_dlon * sin_dlon;
    2.0 * earth.radius_m * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Distance between a surveyed position and the position a receiver reported
/// for it.
pub fn error_distance(true_point: GeoPoint, measured_point: GeoPoint, earth: EarthModel) -> f64 {
    haversine_distance(true_point, measured_point, earth)
}

/// Straight-line distance from the vehicle's fix to a destination. Track
/// geometry is deliberately ignored.
pub fn distance_to_destination(fix: &GpsFix, destination: GeoPoint, earth: EarthModel) -> f64 {
    haversine_distance(fix.point, destination, earth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub station_id: String,
    /// Index into the owning route's polyline.
    pub index: usize,
}

/// An ordered polyline with stations pinned to some of its vertices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRoute", into = "RawRoute")]
pub struct Route {
    route_id: String,
    polyline: Vec<GeoPoint>,
    stations: Vec<Station>,
}

#[derive(Serialize, Deserialize)]
struct RawRoute {
    route_id: String,
    polyline: Vec<GeoPoint>,
    #[serde(default)]
    stations: Vec<Station>,
}

impl TryFrom<RawRoute> for Route {
    type Error = GeoError;
    fn try_from(raw: RawRoute) -> Result<Self, Self::Error> {
        Route::new(raw.route_id, raw.polyline, raw.stations)
    }
}

impl From<Route> for RawRoute {
    fn from(r: Route) -> Self {
        RawRoute {
            route_id: r.route_id,
            polyline: r.polyline,
            stations: r.stations,
        }
    }
}

impl Route {
    pub fn new(
        route_id: impl Into<String>,
        polyline: Vec<GeoPoint>,
        stations: Vec<Station>,
    ) -> Result<Self, GeoError> {
        let route_id = route_id.into();
        if polyline.len() < 2 {
            return Err(GeoError::ShortPolyline { route: route_id });
        }
        if let Some(i) = polyline.windows(2).position(|w| w[0] == w[1]) {
            return Err(GeoError::DuplicatePoint {
                route: route_id,
                index: i + 1,
            });
        }
        let in_range = stations.iter().all(|s| s.index < polyline.len());
        let increasing = stations.windows(2).all(|w| w[0].index < w[1].index);
        if !in_range || !increasing {
            return Err(GeoError::StationIndex { route: route_id });
        }
        Ok(Route {
            route_id,
            polyline,
            stations,
        })
    }

    pub fn route_id(&self) -> &str {
        &self.route_id
    }

    pub fn polyline(&self) -> &[GeoPoint] {
        &self.polyline
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn station(&self, station_id: &str) -> Option<&Station> {
        self.stations.iter().find(|s| s.station_id == station_id)
    }

    pub fn station_point(&self, station_id: &str) -> Option<GeoPoint> {
        self.station(station_id).map(|s| self.polyline[s.index])
    }

    /// Per-segment haversine lengths; `segment_lengths()[i]` spans vertices
    /// `i` and `i + 1`.
    pub fn segment_lengths(&self, earth: EarthModel) -> Vec<f64> {
        self.polyline
            .windows(2)
            .map(|w| haversine_distance(w[0], w[1], earth))
            .collect()
    }

    pub fn total_length(&self, earth: EarthModel) -> f64 {
        self.segment_lengths(earth).iter().sum()
    }
}

/// Along-track distance between two stations: the sum of haversine segment
/// lengths between their polyline indices. Symmetric in its arguments.
pub fn project_along_route(
    route: &Route,
    from_station: &str,
    to_station: &str,
    earth: EarthModel,
) -> Result<f64, GeoError> {
    let from = route
        .station(from_station)
        .ok_or_else(|| GeoError::UnknownStation(from_station.to_string()))?
        .index;
    let to = route
        .station(to_station)
        .ok_or_else(|| GeoError::UnknownStation(to_station.to_string()))?
        .index;
    let (lo, hi) = if from <= to { (from, to) } else { (to, from) };
    Ok(route.polyline[lo..=hi]
        .windows(2)
        .map(|w| haversine_distance(w[0], w[1], earth))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn identical_points_are_zero() {
        let p = pt(6.9271, 79.8612);
        assert_eq!(haversine_distance(p, p, EarthModel::default()), 0.0);
        assert_eq!(error_distance(p, p, EarthModel::default()), 0.0);
    }

    #[test]
    fn half_great_circle() {
        let d = haversine_distance(pt(0.0, 0.0), pt(0.0, 180.0), EarthModel::default());
        assert!((d - std::f64::consts::PI * 6_371_000.0).abs() < 1e-6);
        assert!((d - 20_015_086.796).abs() < 1e-2);
    }

    #[test]
    fn one_degree_meridian_and_equator() {
        let earth = EarthModel::default();
        let expected = 6_371_000.0 * std::f64::consts::PI / 180.0;
        assert!((haversine_distance(pt(0.0, 0.0), pt(1.0, 0.0), earth) - expected).abs() < 1e-6);
        let fix = GpsFix {
            vehicle_id: "t1".into(),
            point: pt(0.0, 1.0),
            timestamp_ms: 0,
            seq: 1,
        };
        assert!((distance_to_destination(&fix, pt(0.0, 0.0), earth) - expected).abs() < 1e-6);
    }

    #[test]
    fn milli_degree_error_distance() {
        let d = error_distance(pt(0.0, 0.0), pt(0.0, 0.001), EarthModel::default());
        assert!((d - 111.19).abs() < 0.01, "{d}");
    }

    #[test]
    fn near_antipodes_do_not_nan() {
        let earth = EarthModel::default();
        for (a, b) in [
            (pt(90.0, 0.0), pt(-90.0, 0.0)),
            (pt(45.0, 10.0), pt(-45.0, -170.0)),
            (pt(1e-9, 0.0), pt(-1e-9, 180.0)),
        ] {
            let d = haversine_distance(a, b, earth);
            assert!(d.is_finite());
            assert!(d <= std::f64::consts::PI * earth.radius_m() + 1e-6);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(matches!(
            GeoPoint::new(91.0, 0.0),
            Err(GeoError::Latitude(_))
        ));
        assert!(matches!(
            GeoPoint::new(0.0, -180.5),
            Err(GeoError::Longitude(_))
        ));
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        assert!(EarthModel::new(0.0).is_err());
        assert!(serde_json::from_str::<GeoPoint>(r#"{"lat_deg":100,"lon_deg":0}"#).is_err());
    }

    fn line_route() -> Route {
        Route::new(
            "r",
            vec![pt(0.0, 0.0), pt(0.0, 1.0), pt(0.0, 2.0), pt(0.0, 3.0)],
            vec![
                Station {
                    station_id: "a".into(),
                    index: 0,
                },
                Station {
                    station_id: "b".into(),
                    index: 1,
                },
                Station {
                    station_id: "c".into(),
                    index: 3,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn along_route_sums_segments() {
        let earth = EarthModel::default();
        let r = line_route();
        let deg = earth.meters_per_degree();
        assert_eq!(project_along_route(&r, "a", "a", earth).unwrap(), 0.0);
        assert!((project_along_route(&r, "a", "c", earth).unwrap() - 3.0 * deg).abs() < 1e-6);
        let ab = project_along_route(&r, "a", "b", earth).unwrap();
        let bc = project_along_route(&r, "b", "c", earth).unwrap();
        let ac = project_along_route(&r, "a", "c", earth).unwrap();
        assert!((ab + bc - ac).abs() < 1e-6);
        assert_eq!(
            project_along_route(&r, "c", "a", earth).unwrap(),
            project_along_route(&r, "a", "c", earth).unwrap()
        );
        assert!(matches!(
            project_along_route(&r, "a", "zz", earth),
            Err(GeoError::UnknownStation(_))
        ));
    }

    #[test]
    fn route_validation() {
        assert!(matches!(
            Route::new("r", vec![pt(0.0, 0.0)], vec![]),
            Err(GeoError::ShortPolyline { .. })
        ));
        assert!(matches!(
            Route::new("r", vec![pt(0.0, 0.0), pt(0.0, 0.0)], vec![]),
            Err(GeoError::DuplicatePoint { .. })
        ));
        let stations = vec![
            Station {
                station_id: "a".into(),
                index: 1,
            },
            Station {
                station_id: "b".into(),
                index: 1,
            },
        ];
        assert!(matches!(
            Route::new("r", vec![pt(0.0, 0.0), pt(0.0, 1.0)], stations),
            Err(GeoError::StationIndex { .. })
        ));
    }
}
