//! MQTT versus HTTP comparison under an injected one-way delay.
//!
//! Unless external endpoints are given, each run starts its own broker and
//! gateway, and puts a delay proxy in front of each.

use std::net::SocketAddr;
use std::time::Duration;

use anyhow::{bail, Context};
use atms_core::latency::{
    measure_http, measure_mqtt, summarize, BenchReport, DelayProxy, HttpMode, HttpTarget,
    MqttTarget, ProxyConfig,
};
use atms_core::mqtt::server::{self, BrokerConfig};
use atms_core::mqtt::QoS;
use atms_gateway::GatewayConfig;

pub const BENCH_TOPIC: &str = "pts/bench/train/bench/bench/t-bench/telemetry/gps";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transports {
    Mqtt,
    Http,
    Both,
}

impl Transports {
    fn mqtt(self) -> bool {
        self != Transports::Http
    }

    fn http(self) -> bool {
        self != Transports::Mqtt
    }
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub transports: Transports,
    pub n: usize,
    pub warmup: usize,
    pub qos: QoS,
    pub http_mode: HttpMode,
    pub delay: Duration,
    pub jitter: Duration,
    /// Existing broker `host:port`; an embedded one otherwise.
    pub broker: Option<String>,
    /// Existing gateway `host:port`; an embedded one otherwise.
    pub gateway: Option<String>,
}

impl Default for BenchPlan {
    fn default() -> Self {
        BenchPlan {
            transports: Transports::Both,
            n: 100,
            warmup: 5,
            qos: QoS::AtLeastOnce,
            http_mode: HttpMode::PerRequest,
            delay: Duration::from_millis(50),
            jitter: Duration::ZERO,
            broker: None,
            gateway: None,
        }
    }
}

fn loopback() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 0))
}

pub async fn run(plan: &BenchPlan) -> anyhow::Result<BenchReport> {
    if plan.n == 0 {
        bail!("n must be at least 1");
    }
    let embedded_broker = match &plan.broker {
        Some(_) => None,
        None => Some(
            server::start(BrokerConfig::ephemeral())
                .await
                .context("starting broker")?,
        ),
    };
    let broker_addr = match (&plan.broker, &embedded_broker) {
        (Some(b), _) => b.clone(),
        (None, Some(h)) => h.local_addr().to_string(),
        (None, None) => unreachable!(),
    };
    let embedded_gateway = match (&plan.gateway, plan.transports.http()) {
        (None, true) => Some(
            atms_gateway::start(GatewayConfig::new(loopback(), broker_addr.clone()))
                .await
                .context("starting gateway")?,
        ),
        _ => None,
    };

    let proxy_config = ProxyConfig {
        jitter: plan.jitter,
        ..ProxyConfig::new(plan.delay)
    };
    let mut mqtt = None;
    let mut http = None;
    if plan.transports.mqtt() {
        let proxy = DelayProxy::start(loopback(), broker_addr.clone(), proxy_config).await?;
        let target = MqttTarget {
            broker: proxy.local_addr().to_string(),
            topic: BENCH_TOPIC.into(),
            qos: plan.qos,
            n: plan.n,
            warmup: plan.warmup,
        };
        mqtt = Some(measure_mqtt(&target).await?);
        proxy.shutdown();
    }
    if plan.transports.http() {
        let gateway = match (&plan.gateway, &embedded_gateway) {
            (Some(g), _) => g.clone(),
            (None, Some(h)) => h.local_addr().to_string(),
            (None, None) => unreachable!(),
        };
        let proxy = DelayProxy::start(loopback(), gateway, proxy_config).await?;
        let target = HttpTarget {
            url: format!("http://{}/ingest/fix", proxy.local_addr()),
            mode: plan.http_mode,
            n: plan.n,
            warmup: plan.warmup,
            timeout: Duration::from_secs(10),
        };
        http = Some(measure_http(&target).await?);
        proxy.shutdown();
    }

    if let Some(g) = embedded_gateway {
        g.shutdown().await;
    }
    if let Some(b) = embedded_broker {
        b.shutdown().await;
    }

    let mut samples = Vec::new();
    let mut failures = (0, 0);
    if let Some(m) = mqtt {
        samples.extend(m.samples);
        failures.0 = m.failures;
    }
    if let Some(h) = http {
        samples.extend(h.samples);
        failures.1 = h.failures;
    }
    let mut report = summarize(&samples)?;
    report.failures.mqtt = failures.0;
    report.failures.http = failures.1;
    report.delay_ms = Some(plan.delay.as_millis() as u64);
    if plan.transports.mqtt() {
        report.qos = Some(plan.qos as u8);
        report.mqtt_latency = Some(
            match plan.qos {
                QoS::AtMostOnce => "publish-to-socket-write",
                _ => "publish-to-puback",
            }
            .into(),
        );
    }
    if plan.transports.http() {
        report.http_mode = Some(plan.http_mode.as_str().into());
    }
    Ok(report)
}
