use serde::{Deserialize, Serialize};

use super::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Mqtt,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub transport: Transport,
    pub seq: u64,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerTransport<T> {
    pub mqtt: T,
    pub http: T,
}

impl<T> PerTransport<T> {
    pub fn get(&self, t: Transport) -> &T {
        match t {
            Transport::Mqtt => &self.mqtt,
            Transport::Http => &self.http,
        }
    }

    pub fn get_mut(&mut self, t: Transport) -> &mut T {
        match t {
            Transport::Mqtt => &mut self.mqtt,
            Transport::Http => &mut self.http,
        }
    }
}

/// Summary of one comparison run. The raw samples are always included so
/// every figure can be recomputed from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Largest per-transport sample count.
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qos: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
    /// What the MQTT timer measures, which depends on QoS.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mqtt_latency: Option<String>,
    pub phi_m_ms: Option<f64>,
    pub phi_h_ms: Option<f64>,
    /// `phi_h_ms / phi_m_ms` when both are present.
    pub ratio: Option<f64>,
    pub p50: PerTransport<Option<f64>>,
    pub p95: PerTransport<Option<f64>>,
    pub failures: PerTransport<u64>,
    pub counts: PerTransport<usize>,
    pub samples: Vec<LatencySample>,
}

/// Nearest-rank percentile of `values`, which need not be sorted.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Means, percentiles and ratio over the given samples. Failures are not
/// samples; callers add their counts to the report.
pub fn summarize(samples: &[LatencySample]) -> Result<BenchReport, BenchError> {
    if samples.is_empty() {
        return Err(BenchError::NoSamples);
    }
    let mut by: PerTransport<Vec<f64>> = PerTransport::default();
    for s in samples {
        by.get_mut(s.transport).push(s.latency_ms);
    }
    let phi_m_ms = mean(&by.mqtt);
    let phi_h_ms = mean(&by.http);
    Ok(BenchReport {
        n: by.mqtt.len().max(by.http.len()),
        qos: None,
        http_mode: None,
        delay_ms: None,
        mqtt_latency: None,
        phi_m_ms,
        phi_h_ms,
        ratio: phi_m_ms.zip(phi_h_ms).map(|(m, h)| h / m),
        p50: PerTransport {
            mqtt: percentile(&by.mqtt, 50.0),
            http: percentile(&by.http, 50.0),
        },
        p95: PerTransport {
            mqtt: percentile(&by.mqtt, 95.0),
            http: percentile(&by.http, 95.0),
        },
        failures: PerTransport::default(),
        counts: PerTransport {
            mqtt: by.mqtt.len(),
            http: by.http.len(),
        },
        samples: samples.to_vec(),
    })
}

impl BenchReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self, BenchError> {
        Ok(serde_json::from_str(s)?)
    }
}
