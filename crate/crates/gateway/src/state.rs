use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use atms_core::alarm::AlarmRegistry;
use atms_core::fare::FareGate;
use atms_core::mqtt::MqttClient;
use atms_core::occupancy::OccupancyMessage;
use atms_core::{GpsFix, TopicAddress};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

pub use crate::users::UserStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub display_name: String,
    pub account_id: Option<String>,
    pub created_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Active,
    Stale,
}

#[derive(Debug, Clone)]
pub struct TrainSnapshot {
    pub address: TopicAddress,
    pub fix: GpsFix,
    /// Gateway clock when the fix arrived; staleness is judged from this.
    pub received_ms: u64,
}

/// One bus message as pushed to WebSocket clients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BusEvent {
    pub topic: String,
    /// Parsed JSON when the payload is JSON, otherwise the raw text.
    pub payload: serde_json::Value,
    pub ts_ms: u64,
}

#[derive(Debug, Default)]
pub struct Metrics {
    pub bus_messages: AtomicU64,
    pub malformed_payloads: AtomicU64,
    pub fixes_applied: AtomicU64,
    pub stale_fixes_ignored: AtomicU64,
    pub alarms_fired: AtomicU64,
    pub notify_failures: AtomicU64,
    pub taps_processed: AtomicU64,
    pub http_ingested: AtomicU64,
    pub ws_clients: AtomicU64,
    pub ws_lagged: AtomicU64,
}

impl Metrics {
    pub fn inc(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> serde_json::Value {
        let g = |c: &AtomicU64| c.load(Ordering::Relaxed);
        serde_json::json!({
            "bus_messages": g(&self.bus_messages),
            "malformed_payloads": g(&self.malformed_payloads),
            "fixes_applied": g(&self.fixes_applied),
            "stale_fixes_ignored": g(&self.stale_fixes_ignored),
            "alarms_fired": g(&self.alarms_fired),
            "notify_failures": g(&self.notify_failures),
            "taps_processed": g(&self.taps_processed),
            "http_ingested": g(&self.http_ingested),
            "ws_clients": g(&self.ws_clients),
            "ws_lagged": g(&self.ws_lagged),
        })
    }
}

pub struct AppState {
    pub users: RwLock<UserStore>,
    pub trains: RwLock<BTreeMap<String, TrainSnapshot>>,
    pub occupancy: RwLock<BTreeMap<String, BTreeMap<String, OccupancyMessage>>>,
    pub alarms: Mutex<AlarmRegistry>,
    pub fare: FareGate,
    pub metrics: Metrics,
    pub events: broadcast::Sender<BusEvent>,
    pub bus: MqttClient,
    pub staleness: Duration,
}

pub type Shared = Arc<AppState>;

impl AppState {
    pub fn status_of(&self, snapshot: &TrainSnapshot, now_ms: u64) -> TrainStatus {
        if now_ms.saturating_sub(snapshot.received_ms) > self.staleness.as_millis() as u64 {
            TrainStatus::Stale
        } else {
            TrainStatus::Active
        }
    }

    pub fn user_for_token(&self, token: &str) -> Option<UserProfile> {
        self.users.read().unwrap().by_token(token).cloned()
    }

    pub fn is_registered(&self, user_id: &str) -> bool {
        self.users.read().unwrap().get(user_id).is_some()
    }
}
