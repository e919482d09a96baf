//! Crossing counts against a brute-force replay of each track.

use std::collections::BTreeMap;
use std::io::Cursor;

use atms_core::occupancy::{
    read_track_stream, replay, CrossingCounter, EntryDirection, LineConfig, OccupancyMessage,
    TrackSample,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reduce each track to its sequence of definite sides (dead band removed),
/// then count adjacent side changes.
fn oracle(samples: &[TrackSample], line: f64, band: f64, entering: EntryDirection) -> (u64, u64) {
    let mut sides: BTreeMap<&str, Vec<i8>> = BTreeMap::new();
    for s in samples {
        let side = if s.centroid_y < line - band {
            -1
        } else if s.centroid_y > line + band {
            1
        } else {
            0
        };
        if side != 0 {
            sides.entry(&s.track_id).or_default().push(side);
        }
    }
    let (mut down, mut up) = (0, 0);
    for seq in sides.values() {
        for w in seq.windows(2) {
            match (w[0], w[1]) {
                (-1, 1) => down += 1,
                (1, -1) => up += 1,
                _ => {}
            }
        }
    }
    match entering {
        EntryDirection::Downward => (down, up),
        EntryDirection::Upward => (up, down),
    }
}

fn trajectory(rng: &mut ChaCha8Rng, line: f64) -> Vec<TrackSample> {
    let tracks = rng.random_range(1..8);
    let mut ys: Vec<f64> = (0..tracks)
        .map(|_| line + rng.random_range(-60.0..60.0))
        .collect();
    let mut samples = Vec::new();
    for frame in 0..rng.random_range(10..120u64) {
        for (t, y) in ys.iter_mut().enumerate() {
            // Tracks occasionally skip frames.
            if rng.random_bool(0.1) {
                continue;
            }
            *y += rng.random_range(-12.0..12.0);
            *y = y.clamp(line - 80.0, line + 80.0);
            samples.push(TrackSample {
                track_id: format!("k{t}"),
                frame_idx: frame,
                centroid_y: *y,
                compartment_id: "c1".into(),
            });
        }
    }
    samples
}

#[test]
fn random_trajectories_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut crossings = 0;
    for i in 0..1000 {
        let line = rng.random_range(100.0..400.0);
        let band = [0.0, 2.0, 5.0, 10.0][i % 4];
        let entering = if i % 2 == 0 {
            EntryDirection::Downward
        } else {
            EntryDirection::Upward
        };
        let config = LineConfig {
            line_y: line,
            hysteresis_px: band,
            entering,
        };
        let samples = trajectory(&mut rng, line);
        let mut counter = CrossingCounter::new(config);
        for s in &samples {
            counter.ingest(s).unwrap();
            let msg = OccupancyMessage::from(&counter.reading("c1", 0));
            assert_eq!(msg.lambda_t, msg.lambda_i.saturating_sub(msg.lambda_o));
        }
        let (want_i, want_o) = oracle(&samples, line, band, entering);
        assert_eq!(
            (counter.lambda_i(), counter.lambda_o()),
            (want_i, want_o),
            "trajectory {i}"
        );
        crossings += want_i + want_o;
    }
    assert!(crossings > 1000);
}

#[test]
fn jitter_inside_band_does_not_count() {
    let mut c = CrossingCounter::new(LineConfig::new(100.0));
    let ys = [80.0, 97.0, 103.0, 98.0, 104.0, 96.0, 80.0];
    for (f, y) in ys.iter().enumerate() {
        c.ingest(&TrackSample {
            track_id: "a".into(),
            frame_idx: f as u64,
            centroid_y: *y,
            compartment_id: "c1".into(),
        })
        .unwrap();
    }
    assert_eq!((c.lambda_i(), c.lambda_o()), (0, 0));
}

#[test]
fn boarding_and_alighting() {
    let mut c = CrossingCounter::new(LineConfig::new(100.0));
    let mut feed = |track: &str, frame: u64, y: f64| {
        c.ingest(&TrackSample {
            track_id: track.into(),
            frame_idx: frame,
            centroid_y: y,
            compartment_id: "c1".into(),
        })
    };
    feed("a", 0, 50.0).unwrap();
    feed("a", 1, 150.0).unwrap();
    feed("b", 0, 50.0).unwrap();
    feed("b", 1, 150.0).unwrap();
    feed("a", 2, 50.0).unwrap();
    assert!(feed("a", 2, 150.0).is_err(), "repeated frame is dropped");
    assert_eq!((c.lambda_i(), c.lambda_o(), c.lambda_t()), (2, 1, 1));
    assert_eq!(c.dropped_samples(), 1);
}

#[test]
fn more_exits_than_entries_clamps_to_zero() {
    let mut c = CrossingCounter::new(LineConfig::new(100.0));
    for (f, y) in [(0, 150.0), (1, 50.0)] {
        c.ingest(&TrackSample {
            track_id: "a".into(),
            frame_idx: f,
            centroid_y: y,
            compartment_id: "c1".into(),
        })
        .unwrap();
    }
    let r = c.reading("c1", 0);
    assert_eq!(
        (r.lambda_i, r.lambda_o, r.lambda_t, r.anomaly_count),
        (0, 1, 0, 1)
    );
}

#[test]
fn json_lines_replay() {
    let stream = r#"{"track":"a","frame":0,"y":40.0,"compartment":"c1"}
{"track":"a","frame":1,"y":160.0,"compartment":"c1"}

{"track":"b","frame":0,"y":40.0,"compartment":"c2"}
{"track":"b","frame":1,"y":160.0,"compartment":"c2"}
{"track":"b","frame":2,"y":40.0,"compartment":"c2"}
"#;
    let samples = read_track_stream(Cursor::new(stream)).unwrap();
    let counters = replay(&samples, LineConfig::new(100.0));
    let c1 = counters.get("c1").unwrap();
    let c2 = counters.get("c2").unwrap();
    assert_eq!((c1.lambda_i(), c1.lambda_o()), (1, 0));
    assert_eq!((c2.lambda_i(), c2.lambda_o(), c2.lambda_t()), (1, 1, 0));
    let msg = serde_json::to_value(OccupancyMessage::from(&counters.readings(7)[0])).unwrap();
    assert_eq!(
        msg,
        serde_json::json!({"compartment":"c1","lambda_i":1,"lambda_o":0,"lambda_t":1,"ts_ms":7})
    );
    assert!(read_track_stream(Cursor::new("{not json")).is_err());
}
