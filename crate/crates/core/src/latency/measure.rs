use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use tracing::debug;

use super::{BenchError, LatencySample, Transport};
use crate::geo::{GeoPoint, GpsFix};
use crate::mqtt::{ClientOptions, MqttClient, QoS};
use crate::sim::encode_fix;

/// Samples plus the number of publishes that timed out or failed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Measurement {
    pub samples: Vec<LatencySample>,
    pub failures: u64,
}

#[derive(Debug, Clone)]
pub struct MqttTarget {
    /// `host:port`
    pub broker: String,
    pub topic: String,
    pub qos: QoS,
    pub n: usize,
    /// Publishes sent first and discarded.
    pub warmup: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HttpMode {
    /// A fresh TCP connection per request.
    PerRequest,
    KeepAlive,
}

impl HttpMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            HttpMode::PerRequest => "per-request",
            HttpMode::KeepAlive => "keep-alive",
        }
    }
}

impl std::str::FromStr for HttpMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-request" => Ok(HttpMode::PerRequest),
            "keep-alive" => Ok(HttpMode::KeepAlive),
            other => Err(format!("unknown http mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct HttpTarget {
    pub url: String,
    pub mode: HttpMode,
    pub n: usize,
    pub warmup: usize,
    pub timeout: Duration,
}

/// A fix payload of the size the simulator publishes.
fn payload(seq: u64) -> String {
    encode_fix(&GpsFix {
        vehicle_id: "t-bench".into(),
        point: GeoPoint::new(6.9331, 79.8501).expect("valid"),
        timestamp_ms: crate::now_ms(),
        seq,
    })
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

/// Times publishes one at a time. At QoS 1 the timer stops at PUBACK; at
/// QoS 0 it stops once the packet is written to the socket.
pub async fn measure_mqtt(target: &MqttTarget) -> Result<Measurement, BenchError> {
    if target.n == 0 {
        return Err(BenchError::ZeroSamples);
    }
    static NEXT: AtomicU64 = AtomicU64::new(1);
    let client_id = format!(
        "bench-{}-{}",
        std::process::id(),
        NEXT.fetch_add(1, Ordering::Relaxed)
    );
    let (client, _messages) = MqttClient::connect(ClientOptions::new(&target.broker, client_id))
        .await
        .map_err(|e| BenchError::Connect(e.to_string()))?;
    let mut out = Measurement::default();
    for i in 0..target.warmup + target.n {
        let start = Instant::now();
        let result = client
            .publish(&target.topic, payload(i as u64), target.qos)
            .await;
        let latency_ms = elapsed_ms(start);
        if i < target.warmup {
            continue;
        }
        let seq = (i - target.warmup) as u64;
        match result {
            Ok(_) => out.samples.push(LatencySample {
                transport: Transport::Mqtt,
                seq,
                latency_ms,
            }),
            Err(e) => {
                debug!(seq, error = %e, "mqtt sample failed");
                out.failures += 1;
            }
        }
    }
    client.disconnect().await;
    Ok(out)
}

/// Times POSTs one at a time, from request start until the whole response
/// body has arrived. Non-2xx responses count as failures.
pub async fn measure_http(target: &HttpTarget) -> Result<Measurement, BenchError> {
    if target.n == 0 {
        return Err(BenchError::ZeroSamples);
    }
    let mut builder = reqwest::Client::builder()
        .timeout(target.timeout)
        .no_proxy();
    if target.mode == HttpMode::PerRequest {
        builder = builder.pool_max_idle_per_host(0);
    }
    let client = builder.build()?;
    let mut out = Measurement::default();
    let mut connected = false;
    for i in 0..target.warmup + target.n {
        let start = Instant::now();
        let result = async {
            let resp = client
                .post(&target.url)
                .header("content-type", "application/json")
                .body(payload(i as u64))
                .send()
                .await?
                .error_for_status()?;
            resp.bytes().await
        }
        .await;
        let latency_ms = elapsed_ms(start);
        match (&result, connected) {
            (Ok(_), _) => connected = true,
            (Err(e), false) if e.is_connect() => return Err(BenchError::Connect(e.to_string())),
            _ => {}
        }
        if i < target.warmup {
            continue;
        }
        let seq = (i - target.warmup) as u64;
        match result {
            Ok(_) => out.samples.push(LatencySample {
                transport: Transport::Http,
                seq,
                latency_ms,
            }),
            Err(e) => {
                debug!(seq, error = %e, "http sample failed");
                out.failures += 1;
            }
        }
    }
    Ok(out)
}
