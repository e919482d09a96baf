//! Core of the train management platform: geodesy, the transport topic
//! scheme, an MQTT 3.1.1 broker and client, the train simulator, destination
//! alarms, e-ticketing, compartment occupancy counting, and the MQTT vs HTTP
//! latency harness.

pub mod alarm;
pub mod fare;
pub mod geo;
pub mod latency;
pub mod mqtt;
pub mod occupancy;
pub mod sim;
pub mod topic;

pub use geo::{EarthModel, GeoPoint, GpsFix, Route, Station};
pub use topic::{Channel, TopicAddress, TopicFilter};

/// Wall-clock milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
