//! Seedable train motion simulator.
//!
//! Trains move at constant speed along their route polyline and stop at the
//! terminus. Each emitted fix is the true position displaced by an isotropic
//! 2-D Gaussian offset; the offset depends only on `(seed, vehicle_id, seq)`
//! so a scenario always yields the same fix stream.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::task::JoinSet;
use tracing::{debug, warn};

use crate::geo::{haversine_distance, EarthModel, GeoError, GeoPoint, GpsFix, Route};
use crate::mqtt::{MqttClient, QoS};
use crate::topic::{Channel, TopicAddress, TopicError};

pub const MIN_FIX_INTERVAL_MS: u64 = 100;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown train {0}")]
    UnknownTrain(String),
    #[error("train {train} references unknown route {route}")]
    UnknownRoute { train: String, route: String },
    #[error("train {0}: speed must be positive")]
    Speed(String),
    #[error("train {0}: fix interval below {MIN_FIX_INTERVAL_MS} ms")]
    FixInterval(String),
    #[error("noise sigma must be finite and non-negative")]
    Sigma,
    #[error("t_ms {t_ms} precedes start {start_ms}")]
    BeforeStart { t_ms: u64, start_ms: u64 },
    #[error(transparent)]
    Topic(#[from] TopicError),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fix payload: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma_m: f64,
}

impl Default for NoiseModel {
    /// Rayleigh mean of 24 m: sigma = 24 * sqrt(2 / pi).
    fn default() -> Self {
        NoiseModel { sigma_m: 19.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub vehicle_id: String,
    pub route_id: String,
    pub travel_service: String,
    pub region: String,
    pub line_id: String,
    pub start_time_ms: u64,
    pub speed_mps: f64,
    #[serde(default = "default_fix_interval")]
    pub fix_interval_ms: u64,
}

fn default_fix_interval() -> u64 {
    1000
}

impl TrainSpec {
    pub fn address(&self, channel: Channel) -> Result<TopicAddress, TopicError> {
        TopicAddress::new(
            &self.region,
            "train",
            &self.travel_service,
            &self.line_id,
            &self.vehicle_id,
            channel,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub routes: Vec<Route>,
    pub trains: Vec<TrainSpec>,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self, SimError> {
        let scenario: Scenario = serde_json::from_str(s)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.noise.sigma_m.is_finite() && self.noise.sigma_m >= 0.0) {
            return Err(SimError::Sigma);
        }
        for t in &self.trains {
            if !self.routes.iter().any(|r| r.route_id() == t.route_id) {
                return Err(SimError::UnknownRoute {
                    train: t.vehicle_id.clone(),
                    route: t.route_id.clone(),
                });
            }
            if !(t.speed_mps.is_finite() && t.speed_mps > 0.0) {
                return Err(SimError::Speed(t.vehicle_id.clone()));
            }
            if t.fix_interval_ms < MIN_FIX_INTERVAL_MS {
                return Err(SimError::FixInterval(t.vehicle_id.clone()));
            }
            t.address(Channel::TelemetryGps)?;
        }
        Ok(())
    }
}

/// Precomputed geometry of one route.
#[derive(Debug, Clone)]
struct Track {
    points: Vec<GeoPoint>,
    /// Cumulative distance at each vertex.
    cumulative: Vec<f64>,
}

impl Track {
    fn new(route: &Route, earth: EarthModel) -> Self {
        let points = route.polyline().to_vec();
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + haversine_distance(w[0], w[1], earth));
        }
        Track { points, cumulative }
    }

    fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Point at along-track distance `d`, clamped to the ends.
    fn point_at(&self, d: f64) -> GeoPoint {
        let d = d.clamp(0.0, self.length());
        let i = self
            .cumulative
            .partition_point(|&c| c <= d)
            .clamp(1, self.points.len() - 1);
        let (a, b) = (self.points[i - 1], self.points[i]);
        let span = self.cumulative[i] - self.cumulative[i - 1];
        let f = if span > 0.0 {
            (d - self.cumulative[i - 1]) / span
        } else {
            0.0
        };
        let f = f.clamp(0.0, 1.0);
        GeoPoint::new(
            a.lat_deg() + f * (b.lat_deg() - a.lat_deg()),
            a.lon_deg() + f * (b.lon_deg() - a.lon_deg()),
        )
        .expect("interpolation between valid points")
    }
}

#[derive(Debug, Clone)]
pub struct Simulator {
    scenario: Scenario,
    earth: EarthModel,
    tracks: HashMap<String, Track>,
}

impl Simulator {
    pub fn new(scenario: Scenario, earth: EarthModel) -> Result<Self, SimError> {
        scenario.validate()?;
        let tracks = scenario
            .routes
            .iter()
            .map(|r| (r.route_id().to_string(), Track::new(r, earth)))
            .collect();
        Ok(Simulator {
            scenario,
            earth,
            tracks,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn train(&self, vehicle_id: &str) -> Result<&TrainSpec, SimError> {
        self.scenario
            .trains
            .iter()
            .find(|t| t.vehicle_id == vehicle_id)
            .ok_or_else(|| SimError::UnknownTrain(vehicle_id.to_string()))
    }

    fn track(&self, train: &TrainSpec) -> &Track {
        &self.tracks[&train.route_id]
    }

    /// Noise-free position at `t_ms`.
    pub fn true_position(&self, vehicle_id: &str, t_ms: u64) -> Result<GeoPoint, SimError> {
        let train = self.train(vehicle_id)?;
        if t_ms < train.start_time_ms {
            return Err(SimError::BeforeStart {
                t_ms,
                start_ms: train.start_time_ms,
            });
        }
        let travelled = train.speed_mps * (t_ms - train.start_time_ms) as f64 / 1000.0;
        Ok(self.track(train).point_at(travelled))
    }

    /// Fix emitted at `t_ms`. `seq` counts fix intervals since start, from 1.
    pub fn step(&self, vehicle_id: &str, t_ms: u64) -> Result<GpsFix, SimError> {
        let truth = self.true_position(vehicle_id, t_ms)?;
        let train = self.train(vehicle_id)?;
        let seq = (t_ms - train.start_time_ms) / train.fix_interval_ms + 1;
        let point = displace(
            truth,
            noise_offset(self.scenario.seed, vehicle_id, seq, self.scenario.noise),
            self.earth,
        );
        Ok(GpsFix {
            vehicle_id: vehicle_id.to_string(),
            point,
            timestamp_ms: t_ms,
            seq,
        })
    }

    /// The fix with sequence number `seq` (1-based).
    pub fn fix(&self, vehicle_id: &str, seq: u64) -> Result<GpsFix, SimError> {
        let train = self.train(vehicle_id)?;
        self.step(
            vehicle_id,
            train.start_time_ms + seq.saturating_sub(1) * train.fix_interval_ms,
        )
    }

    /// Fix with sequence number `seq` plus the noise-free position it came from.
    pub fn fix_with_truth(
        &self,
        vehicle_id: &str,
        seq: u64,
    ) -> Result<(GpsFix, GeoPoint), SimError> {
        let fix = self.fix(vehicle_id, seq)?;
        let truth = self.true_position(vehicle_id, fix.timestamp_ms)?;
        Ok((fix, truth))
    }
}

/// East and north offset in meters for one fix.
pub fn noise_offset(seed: u64, vehicle_id: &str, seq: u64, noise: NoiseModel) -> (f64, f64) {
    if noise.sigma_m == 0.0 {
        return (0.0, 0.0);
    }
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(vehicle_id.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&seq.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    let normal = Normal::new(0.0, noise.sigma_m).expect("validated sigma");
    (normal.sample(&mut rng), normal.sample(&mut rng))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Shifts `p` by a local tangent-plane offset.
pub fn displace(p: GeoPoint, (east_m, north_m): (f64, f64), earth: EarthModel) -> GeoPoint {
    let mpd = earth.meters_per_degree();
    let lat = (p.lat_deg() + north_m / mpd).clamp(-90.0, 90.0);
    let cos = p.lat_deg().to_radians().cos().max(1e-12);
    let mut lon = p.lon_deg() + east_m / (mpd * cos);
    if lon > 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    GeoPoint::new(lat, lon).expect("clamped into range")
}

/// The wire form of a fix, lat/lon with six decimals.
pub fn encode_fix(fix: &GpsFix) -> String {
    let mut s = String::with_capacity(96);
    let vehicle = serde_json::to_string(&fix.vehicle_id).expect("string");
    write!(
        s,
        r#"{{"vehicle":{vehicle},"ts_ms":{},"lat_deg":{:.6},"lon_deg":{:.6},"seq":{}}}"#,
        fix.timestamp_ms,
        fix.point.lat_deg(),
        fix.point.lon_deg(),
        fix.seq
    )
    .expect("write to string");
    s
}

#[derive(Deserialize)]
struct FixWire {
    vehicle: String,
    ts_ms: u64,
    lat_deg: f64,
    lon_deg: f64,
    seq: u64,
}

pub fn decode_fix(payload: &[u8]) -> Result<GpsFix, SimError> {
    let w: FixWire =
        serde_json::from_slice(payload).map_err(|e| SimError::Payload(e.to_string()))?;
    Ok(GpsFix {
        vehicle_id: w.vehicle,
        point: GeoPoint::new(w.lat_deg, w.lon_deg)?,
        timestamp_ms: w.ts_ms,
        seq: w.seq,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    /// Fix timestamps follow the scenario timeline; publishing does not wait.
    Simulated,
    /// Publishes every `fix_interval_ms` of real time, optionally scaled
    /// (2 runs twice as fast).
    Wall { speedup: u32 },
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub clock: Clock,
    /// Fixes per train; `None` runs until every train has reached its
    /// terminus and one more fix has been sent.
    pub fixes_per_train: Option<u64>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            clock: Clock::Simulated,
            fixes_per_train: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub published: u64,
    pub failed: u64,
}

/// Publishes every train's fix stream on its telemetry topic at QoS 0.
/// Trains run as independent tasks.
pub async fn run(
    sim: Simulator,
    client: MqttClient,
    options: RunOptions,
) -> Result<RunSummary, SimError> {
    let sim = std::sync::Arc::new(sim);
    let mut tasks = JoinSet::new();
    for train in sim.scenario().trains.clone() {
        let topic = train.address(Channel::TelemetryGps)?.render();
        let sim = sim.clone();
        let client = client.clone();
        let options = options.clone();
        tasks.spawn(async move { run_train(&sim, &train, &topic, &client, &options).await });
    }
    let mut summary = RunSummary::default();
    while let Some(r) = tasks.join_next().await {
        let s = r.expect("train task panicked");
        summary.published += s.published;
        summary.failed += s.failed;
    }
    Ok(summary)
}

async fn run_train(
    sim: &Simulator,
    train: &TrainSpec,
    topic: &str,
    client: &MqttClient,
    options: &RunOptions,
) -> RunSummary {
    let track_len = sim.track(train).length();
    let arrival_seq =
        (track_len / train.speed_mps * 1000.0 / train.fix_interval_ms as f64).ceil() as u64 + 2;
    let last = options.fixes_per_train.unwrap_or(arrival_seq);
    let mut summary = RunSummary::default();
    let mut ticker = match options.clock {
        Clock::Wall { speedup } => {
            let period = Duration::from_millis(train.fix_interval_ms) / speedup.max(1);
            let mut t = tokio::time::interval(period);
            t.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            Some(t)
        }
        Clock::Simulated => None,
    };
    for seq in 1..=last {
        match ticker.as_mut() {
            Some(t) => {
                t.tick().await;
            }
            None => tokio::task::yield_now().await,
        }
        let fix = sim.fix(&train.vehicle_id, seq).expect("validated train");
        match client
            .publish(topic, encode_fix(&fix), QoS::AtMostOnce)
            .await
        {
            Ok(_) => summary.published += 1,
            Err(e) => {
                summary.failed += 1;
                warn!(vehicle = train.vehicle_id, seq, error = %e, "fix not published");
            }
        }
    }
    debug!(
        vehicle = train.vehicle_id,
        published = summary.published,
        "train finished"
    );
    summary
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{error_distance, Station};

    fn scenario(sigma_m: f64) -> Scenario {
        let polyline = vec![
            GeoPoint::new(6.9331, 79.8501).unwrap(),
            GeoPoint::new(6.9500, 79.8700).unwrap(),
            GeoPoint::new(7.0000, 79.9000).unwrap(),
        ];
        let stations = vec![
            Station {
                station_id: "s-fort".into(),
                index: 0,
            },
            Station {
                station_id: "s-end".into(),
                index: 2,
            },
        ];
        Scenario {
            routes: vec![Route::new("r1", polyline, stations).unwrap()],
            trains: vec![TrainSpec {
                vehicle_id: "t1015".into(),
                route_id: "r1".into(),
                travel_service: "intercity".into(),
                region: "lk".into(),
                line_id: "main".into(),
                start_time_ms: 1_700_000_000_000,
                speed_mps: 20.0,
                fix_interval_ms: 1000,
            }],
            noise: NoiseModel { sigma_m },
            seed: 7,
        }
    }

    #[test]
    fn noiseless_start_is_first_vertex() {
        let sim = Simulator::new(scenario(0.0), EarthModel::default()).unwrap();
        let fix = sim.step("t1015", 1_700_000_000_000).unwrap();
        assert_eq!(fix.seq, 1);
        assert_eq!(fix.point, GeoPoint::new(6.9331, 79.8501).unwrap());
    }

    #[test]
    fn motion_is_monotone_and_clamped() {
        let earth = EarthModel::default();
        let s = scenario(0.0);
        let route = s.routes[0].clone();
        let sim = Simulator::new(s, earth).unwrap();
        let end = *route.polyline().last().unwrap();
        let total = route.total_length(earth);
        let mut prev = f64::MAX;
        for k in 0..2000u64 {
            let p = sim
                .true_position("t1015", 1_700_000_000_000 + k * 5000)
                .unwrap();
            let remaining = crate::geo::haversine_distance(p, end, earth);
            assert!(remaining <= prev + 1e-6);
            prev = remaining;
        }
        assert!(prev < 1e-6, "terminus reached after {total} m");
    }

    #[test]
    fn before_start_and_unknown_train() {
        let sim = Simulator::new(scenario(1.0), EarthModel::default()).unwrap();
        assert!(matches!(
            sim.step("t1015", 0),
            Err(SimError::BeforeStart { .. })
        ));
        assert!(matches!(
            sim.step("nope", 0),
            Err(SimError::UnknownTrain(_))
        ));
    }

    #[test]
    fn validation() {
        let mut s = scenario(1.0);
        s.trains[0].fix_interval_ms = 50;
        assert!(matches!(s.validate(), Err(SimError::FixInterval(_))));
        let mut s = scenario(1.0);
        s.trains[0].speed_mps = 0.0;
        assert!(matches!(s.validate(), Err(SimError::Speed(_))));
        let mut s = scenario(1.0);
        s.trains[0].route_id = "r9".into();
        assert!(matches!(s.validate(), Err(SimError::UnknownRoute { .. })));
        assert!(matches!(scenario(-1.0).validate(), Err(SimError::Sigma)));
    }

    #[test]
    fn deterministic_noise() {
        let a = Simulator::new(scenario(19.15), EarthModel::default()).unwrap();
        let b = Simulator::new(scenario(19.15), EarthModel::default()).unwrap();
        for seq in 1..50 {
            assert_eq!(
                encode_fix(&a.fix("t1015", seq).unwrap()),
                encode_fix(&b.fix("t1015", seq).unwrap())
            );
        }
        let mut c = scenario(19.15);
        c.seed = 8;
        let c = Simulator::new(c, EarthModel::default()).unwrap();
        assert_ne!(a.fix("t1015", 3).unwrap(), c.fix("t1015", 3).unwrap());
    }

    #[test]
    fn offset_magnitude_matches_error_distance() {
        let earth = EarthModel::default();
        let p = GeoPoint::new(6.9, 79.8).unwrap();
        let q = displace(p, (30.0, 40.0), earth);
        assert!((error_distance(p, q, earth) - 50.0).abs() < 0.01);
    }

    #[test]
    fn payload_format() {
        let fix = GpsFix {
            vehicle_id: "t1015".into(),
            point: GeoPoint::new(6.9331, 79.8501).unwrap(),
            timestamp_ms: 1_700_000_000_000,
            seq: 42,
        };
        let s = encode_fix(&fix);
        assert_eq!(
            s,
            r#"{"vehicle":"t1015","ts_ms":1700000000000,"lat_deg":6.933100,"lon_deg":79.850100,"seq":42}"#
        );
        assert_eq!(decode_fix(s.as_bytes()).unwrap(), fix);
        assert!(
            decode_fix(br#"{"vehicle":"x","ts_ms":1,"lat_deg":91,"lon_deg":0,"seq":1}"#).is_err()
        );
        assert!(decode_fix(b"not json").is_err());
    }

    #[test]
    fn scenario_json_round_trip() {
        let s = scenario(19.15);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(Scenario::from_json(&json).unwrap(), s);
    }
}
