//! Haversine distance against a chord/vector great-circle formula.

use std::f64::consts::PI;
use std::time::Instant;

use atms_core::geo::{
    distance_to_destination, error_distance, haversine_distance, project_along_route, EarthModel,
    GeoError,
};
use atms_core::{GeoPoint, GpsFix, Route, Station};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const R: f64 = 6_371_000.0;

/// Central angle from unit vectors: atan2(|a x b|, a . b).
fn vector_distance(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let v = |lat: f64, lon: f64| {
        let (lat, lon) = (lat.to_radians(), lon.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    };
    let (a, b) = (v(lat1, lon1), v(lat2, lon2));
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let norm = (cross[0].powi(2) + cross[1].powi(2) + cross[2].powi(2)).sqrt();
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    R * norm.atan2(dot)
}

fn pt(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint::new(lat, lon).unwrap()
}

#[test]
fn random_pairs_match_vector_oracle() {
    let earth = EarthModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6e0);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (lat1, lon1) = (
            rng.random_range(-90.0..=90.0),
            rng.random_range(-180.0..=180.0),
        );
        let (lat2, lon2) = (
            rng.random_range(-90.0..=90.0),
            rng.random_range(-180.0..=180.0),
        );
        let got = haversine_distance(pt(lat1, lon1), pt(lat2, lon2), earth);
        let want = vector_distance(lat1, lon1, lat2, lon2);
        let rel = (got - want).abs() / want.max(1e-300);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-9, "worst relative error {worst:e}");
    assert!(start.elapsed().as_secs_f64() < 1.0);
}

#[test]
fn analytic_cases() {
    let earth = EarthModel::default();
    let one_degree = haversine_distance(pt(0.0, 0.0), pt(0.0, 1.0), earth);
    assert!((one_degree - R * PI / 180.0).abs() < 1e-6);
    let antipodes = haversine_distance(pt(0.0, 0.0), pt(0.0, 180.0), earth);
    assert!((antipodes - R * PI).abs() < 1e-6);
    let poles = haversine_distance(pt(90.0, 0.0), pt(-90.0, 0.0), earth);
    assert!((poles - R * PI).abs() < 1e-6);
    assert!(!haversine_distance(pt(10.0, 20.0), pt(-10.0, -160.0), earth).is_nan());
}

#[test]
fn identity_and_symmetry() {
    let earth = EarthModel::default();
    let a = pt(6.9271, 79.8612);
    let b = pt(7.2906, 80.6337);
    assert_eq!(haversine_distance(a, a, earth), 0.0);
    assert_eq!(
        haversine_distance(a, b, earth),
        haversine_distance(b, a, earth)
    );
    assert_eq!(error_distance(a, b, earth), haversine_distance(a, b, earth));
    let fix = GpsFix {
        vehicle_id: "t1".into(),
        point: a,
        timestamp_ms: 0,
        seq: 1,
    };
    assert_eq!(
        distance_to_destination(&fix, b, earth),
        haversine_distance(a, b, earth)
    );
}

#[test]
fn validation() {
    assert!(matches!(
        GeoPoint::new(90.5, 0.0),
        Err(GeoError::Latitude(_))
    ));
    assert!(matches!(
        GeoPoint::new(0.0, 181.0),
        Err(GeoError::Longitude(_))
    ));
    assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    assert!(EarthModel::new(0.0).is_err());
    assert!(serde_json::from_str::<GeoPoint>(r#"{"lat_deg":95,"lon_deg":0}"#).is_err());
}

#[test]
fn along_route_sums_segments() {
    let earth = EarthModel::default();
    let poly = vec![pt(0.0, 0.0), pt(0.0, 1.0), pt(1.0, 1.0), pt(1.0, 2.0)];
    let stations = vec![
        Station {
            station_id: "a".into(),
            index: 0,
        },
        Station {
            station_id: "c".into(),
            index: 2,
        },
        Station {
            station_id: "d".into(),
            index: 3,
        },
    ];
    let route = Route::new("r", poly.clone(), stations).unwrap();
    let ac = vector_distance(0.0, 0.0, 0.0, 1.0) + vector_distance(0.0, 1.0, 1.0, 1.0);
    let got = project_along_route(&route, "a", "c", earth).unwrap();
    assert!((got - ac).abs() < 1e-6);
    assert_eq!(project_along_route(&route, "c", "a", earth).unwrap(), got);
    assert_eq!(project_along_route(&route, "d", "d", earth).unwrap(), 0.0);
    assert!(project_along_route(&route, "a", "x", earth).is_err());
    assert!(route.total_length(earth) > got);
}
