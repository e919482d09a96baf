//! Line-crossing passenger counting.
//!
//! Input is the per-frame output of an upstream person tracker: one centroid
//! per track per frame. A track is in the zone above or below a horizontal
//! reference line only once its centroid clears the line by more than the
//! hysteresis band; each completed zone change counts one boarding or one
//! alighting. Occupancy is `max(0, entered - exited)`.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::mpsc;
use tracing::warn;

use crate::mqtt::{ClientError, MqttClient, QoS};
use crate::topic::{Channel, TopicAddress};

#[derive(Debug, Error)]
pub enum OccupancyError {
    #[error("track {track}: frame {frame} does not follow {last}")]
    FrameRegression {
        track: String,
        frame: u64,
        last: u64,
    },
    #[error("track {0}: centroid is not finite")]
    NonFinite(String),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One tracked centroid. Serialized as the JSON-lines track stream format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    #[serde(rename = "track")]
    pub track_id: String,
    #[serde(rename = "frame")]
    pub frame_idx: u64,
    /// Pixels from the top of the image.
    #[serde(rename = "y")]
    pub centroid_y: f64,
    #[serde(rename = "compartment")]
    pub compartment_id: String,
}

/// Which vertical motion means boarding. Depends on camera mounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryDirection {
    /// Increasing y (top of image towards bottom).
    #[default]
    Downward,
    Upward,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineConfig {
    pub line_y: f64,
    pub hysteresis_px: f64,
    #[serde(default)]
    pub entering: EntryDirection,
}

impl LineConfig {
    pub const DEFAULT_HYSTERESIS_PX: f64 = 5.0;

    pub fn new(line_y: f64) -> Self {
        LineConfig {
            line_y,
            hysteresis_px: Self::DEFAULT_HYSTERESIS_PX,
            entering: EntryDirection::Downward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    Above,
    Below,
}

impl LineConfig {
    /// `None` inside the dead band.
    pub fn zone(&self, y: f64) -> Option<Zone> {
        if y < self.line_y - self.hysteresis_px {
            Some(Zone::Above)
        } else if y > self.line_y + self.hysteresis_px {
            Some(Zone::Below)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CountDelta {
    pub entered: u64,
    pub exited: u64,
}

impl CountDelta {
    pub fn is_empty(&self) -> bool {
        self.entered == 0 && self.exited == 0
    }
}

#[derive(Debug, Clone)]
struct TrackState {
    last_frame: u64,
    zone: Option<Zone>,
}

#[derive(Debug, Clone)]
pub struct CrossingCounter {
    config: LineConfig,
    lambda_i: u64,
    lambda_o: u64,
    negative_events: u64,
    dropped_samples: u64,
    tracks: HashMap<String, TrackState>,
}

/// Snapshot of one compartment's counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyReading {
    pub compartment_id: String,
    pub lambda_i: u64,
    pub lambda_o: u64,
    pub lambda_t: u64,
    /// Exits that left more exits than entries on record.
    pub anomaly_count: u64,
    pub ts_ms: u64,
}

/// Occupancy channel payload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyMessage {
    pub compartment: String,
    pub lambda_i: u64,
    pub lambda_o: u64,
    pub lambda_t: u64,
    pub ts_ms: u64,
}

impl From<&OccupancyReading> for OccupancyMessage {
    fn from(r: &OccupancyReading) -> Self {
        OccupancyMessage {
            compartment: r.compartment_id.clone(),
            lambda_i: r.lambda_i,
            lambda_o: r.lambda_o,
            lambda_t: r.lambda_t,
            ts_ms: r.ts_ms,
        }
    }
}

impl CrossingCounter {
    pub fn new(config: LineConfig) -> Self {
        CrossingCounter {
            config,
            lambda_i: 0,
            lambda_o: 0,
            negative_events: 0,
            dropped_samples: 0,
            tracks: HashMap::new(),
        }
    }

    pub fn config(&self) -> &LineConfig {
        &self.config
    }

    pub fn lambda_i(&self) -> u64 {
        self.lambda_i
    }

    pub fn lambda_o(&self) -> u64 {
        self.lambda_o
    }

    pub fn lambda_t(&self) -> u64 {
        self.lambda_i.saturating_sub(self.lambda_o)
    }

    pub fn dropped_samples(&self) -> u64 {
        self.dropped_samples
    }

    /// Feeds one sample. Out-of-order frames for a track are dropped and
    /// reported as an error; the counter is left unchanged.
    pub fn ingest(&mut self, sample: &TrackSample) -> Result<CountDelta, OccupancyError> {
        if !sample.centroid_y.is_finite() {
            self.dropped_samples += 1;
            return Err(OccupancyError::NonFinite(sample.track_id.clone()));
        }
        let zone = self.config.zone(sample.centroid_y);
        let state = match self.tracks.get_mut(&sample.track_id) {
            Some(state) => {
                if sample.frame_idx <= state.last_frame {
                    self.dropped_samples += 1;
                    warn!(
                        track = sample.track_id,
                        frame = sample.frame_idx,
                        "frame regression"
                    );
                    return Err(OccupancyError::FrameRegression {
                        track: sample.track_id.clone(),
                        frame: sample.frame_idx,
                        last: state.last_frame,
                    });
                }
                state
            }
            None => {
                self.tracks.insert(
                    sample.track_id.clone(),
                    TrackState {
                        last_frame: sample.frame_idx,
                        zone,
                    },
                );
                return Ok(CountDelta::default());
            }
        };
        state.last_frame = sample.frame_idx;

        let mut delta = CountDelta::default();
        let Some(zone) = zone else {
            return Ok(delta);
        };
        let previous = state.zone.replace(zone);
        let moved = match (previous, zone) {
            (Some(Zone::Above), Zone::Below) => Some(EntryDirection::Downward),
            (Some(Zone::Below), Zone::Above) => Some(EntryDirection::Upward),
            _ => None,
        };
        if let Some(direction) = moved {
            if direction == self.config.entering {
                self.lambda_i += 1;
                delta.entered = 1;
            } else {
                self.lambda_o += 1;
                delta.exited = 1;
                if self.lambda_o > self.lambda_i {
                    self.negative_events += 1;
                }
            }
        }
        Ok(delta)
    }

    pub fn reading(&self, compartment_id: &str, ts_ms: u64) -> OccupancyReading {
        OccupancyReading {
            compartment_id: compartment_id.to_string(),
            lambda_i: self.lambda_i,
            lambda_o: self.lambda_o,
            lambda_t: self.lambda_t(),
            anomaly_count: self.negative_events,
            ts_ms,
        }
    }
}

/// Counters for several compartments sharing one line configuration,
/// routed by each sample's compartment id.
#[derive(Debug, Clone)]
pub struct CompartmentCounters {
    config: LineConfig,
    counters: BTreeMap<String, CrossingCounter>,
}

impl CompartmentCounters {
    pub fn new(config: LineConfig) -> Self {
        CompartmentCounters {
            config,
            counters: BTreeMap::new(),
        }
    }

    pub fn ingest(&mut self, sample: &TrackSample) -> Result<CountDelta, OccupancyError> {
        self.counters
            .entry(sample.compartment_id.clone())
            .or_insert_with(|| CrossingCounter::new(self.config))
            .ingest(sample)
    }

    pub fn get(&self, compartment_id: &str) -> Option<&CrossingCounter> {
        self.counters.get(compartment_id)
    }

    pub fn readings(&self, ts_ms: u64) -> Vec<OccupancyReading> {
        self.counters
            .iter()
            .map(|(id, c)| c.reading(id, ts_ms))
            .collect()
    }
}

/// Reads a JSON-lines track stream. Blank lines are skipped.
pub fn read_track_stream(reader: impl BufRead) -> Result<Vec<TrackSample>, OccupancyError> {
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(
            serde_json::from_str(&line).map_err(|source| OccupancyError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(samples)
}

/// Replays a recorded stream through fresh counters.
pub fn replay(samples: &[TrackSample], config: LineConfig) -> CompartmentCounters {
    let mut counters = CompartmentCounters::new(config);
    for s in samples {
        let _ = counters.ingest(s);
    }
    counters
}

/// Publishes a reading on the vehicle's occupancy channel at QoS 1.
pub async fn publish_reading(
    client: &MqttClient,
    vehicle: &TopicAddress,
    reading: &OccupancyReading,
) -> Result<(), ClientError> {
    let topic = vehicle.with_channel(Channel::Occupancy).render();
    let payload = serde_json::to_vec(&OccupancyMessage::from(reading)).expect("serializable");
    client.publish(topic, payload, QoS::AtLeastOnce).await?;
    Ok(())
}

/// Runs one compartment counter over a live sample feed, publishing on
/// every count change and additionally every `cadence`. Returns the final
/// counter when the feed closes.
pub async fn run_compartment(
    mut counter: CrossingCounter,
    compartment_id: String,
    vehicle: TopicAddress,
    client: MqttClient,
    cadence: Duration,
    mut samples: mpsc::Receiver<TrackSample>,
) -> CrossingCounter {
    let mut ticker = tokio::time::interval(cadence);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    ticker.tick().await;
    loop {
        tokio::select! {
            sample = samples.recv() => {
                let Some(sample) = sample else { break };
                match counter.ingest(&sample) {
                    Ok(delta) if !delta.is_empty() => {
                        let reading = counter.reading(&compartment_id, crate::now_ms());
                        if let Err(e) = publish_reading(&client, &vehicle, &reading).await {
                            warn!(error = %e, "occupancy publish failed");
                        }
                    }
                    Ok(_) => {}
                    Err(e) => warn!(error = %e, "sample dropped"),
                }
            }
            _ = ticker.tick() => {
                let reading = counter.reading(&compartment_id, crate::now_ms());
                if let Err(e) = publish_reading(&client, &vehicle, &reading).await {
                    warn!(error = %e, "occupancy publish failed");
                }
            }
        }
    }
    counter
}
