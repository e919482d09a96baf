//! Publish-latency measurement for MQTT and HTTP, with a TCP proxy that
//! injects a fixed one-way delay so both transports see the same network.

mod measure;
mod proxy;
mod stats;

pub use measure::{measure_http, measure_mqtt, HttpMode, HttpTarget, Measurement, MqttTarget};
pub use proxy::{DelayProxy, ProxyConfig};
pub use stats::{percentile, summarize, BenchReport, LatencySample, PerTransport, Transport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("no samples to summarize")]
    NoSamples,
    #[error("connect failed: {0}")]
    Connect(String),
    #[error("http client: {0}")]
    Http(#[from] reqwest::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Json(#[from] serde_json::Error),
}
