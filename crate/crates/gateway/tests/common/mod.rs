#![allow(dead_code)]

use std::path::PathBuf;
use std::time::{Duration, Instant};

use atms_core::mqtt::server::{self, BrokerConfig, BrokerHandle};
use atms_core::mqtt::{ClientOptions, MqttClient};
use atms_core::{GeoPoint, Route, Station};
use atms_gateway::{GatewayConfig, GatewayHandle};
use serde_json::{json, Value};

pub struct Rig {
    pub broker: BrokerHandle,
    pub gateway: GatewayHandle,
    pub http: reqwest::Client,
    pub publisher: MqttClient,
}

pub fn route() -> Route {
    let polyline = vec![
        GeoPoint::new(6.9344, 79.8428).unwrap(),
        GeoPoint::new(6.9500, 79.8600).unwrap(),
        GeoPoint::new(7.0000, 79.9000).unwrap(),
    ];
    let stations = ["s-a", "s-b", "s-c"]
        .iter()
        .enumerate()
        .map(|(index, id)| Station {
            station_id: id.to_string(),
            index,
        })
        .collect();
    Route::new("r-1", polyline, stations).unwrap()
}

pub fn config(broker: &BrokerHandle) -> GatewayConfig {
    let mut config = GatewayConfig::new(
        "127.0.0.1:0".parse().unwrap(),
        broker.local_addr().to_string(),
    );
    config.routes = vec![route()];
    config
}

impl Rig {
    pub async fn start() -> Rig {
        Rig::start_with(|_| {}).await
    }

    pub async fn start_with(tweak: impl FnOnce(&mut GatewayConfig)) -> Rig {
        let broker = server::start(BrokerConfig::ephemeral()).await.unwrap();
        let mut cfg = config(&broker);
        tweak(&mut cfg);
        let gateway = atms_gateway::start(cfg).await.unwrap();
        let (publisher, _) = MqttClient::connect(ClientOptions::new(
            broker.local_addr().to_string(),
            "test-pub",
        ))
        .await
        .unwrap();
        Rig {
            broker,
            gateway,
            http: reqwest::Client::new(),
            publisher,
        }
    }

    pub fn url(&self, path: &str) -> String {
        self.gateway.url(path)
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.http.get(self.url(path)).send().await.unwrap();
        split(r).await
    }

    pub async fn send(
        &self,
        method: reqwest::Method,
        path: &str,
        token: Option<&str>,
        body: Option<Value>,
    ) -> (u16, Value) {
        let mut req = self.http.request(method, self.url(path));
        if let Some(t) = token {
            req = req.bearer_auth(t);
        }
        if let Some(b) = body {
            req = req.json(&b);
        }
        split(req.send().await.unwrap()).await
    }

    pub async fn post(&self, path: &str, token: Option<&str>, body: Value) -> (u16, Value) {
        self.send(reqwest::Method::POST, path, token, Some(body))
            .await
    }

    /// Registers a user and links an e-ticketing account. Returns
    /// `(token, account_id)`.
    pub async fn passenger(&self, user_id: &str) -> (String, String) {
        let (status, user) = self
            .post(
                "/users",
                None,
                json!({"display_name": user_id, "user_id": user_id}),
            )
            .await;
        assert_eq!(status, 201, "{user}");
        let token = user["token"].as_str().unwrap().to_string();
        let (status, linked) = self
            .post(&format!("/users/{user_id}/epass"), Some(&token), json!({}))
            .await;
        assert_eq!(status, 201, "{linked}");
        (
            token,
            linked["account"]["account_id"]
                .as_str()
                .unwrap()
                .to_string(),
        )
    }

    pub async fn shutdown(self) {
        self.gateway.shutdown().await;
        self.broker.shutdown().await;
    }
}

pub async fn split(r: reqwest::Response) -> (u16, Value) {
    let status = r.status().as_u16();
    let text = r.text().await.unwrap();
    let body = if text.is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).unwrap_or(Value::String(text))
    };
    (status, body)
}

/// Polls until `check` is true or the deadline passes.
pub async fn eventually<F, Fut>(within: Duration, mut check: F) -> bool
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = bool>,
{
    let deadline = Instant::now() + within;
    loop {
        if check().await {
            return true;
        }
        if Instant::now() > deadline {
            return false;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
}

pub fn temp_path(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}
