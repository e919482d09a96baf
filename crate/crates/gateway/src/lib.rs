//! Bridges the transport bus to a JSON REST API and a WebSocket stream.
//!
//! One subscription on `pts/#` feeds an ordered pipeline that keeps train
//! snapshots, evaluates destination alarms, applies bus taps to the fare
//! ledger and fans every message out to WebSocket clients.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use atms_core::alarm::AlarmRegistry;
use atms_core::fare::{FareConfig, FareError, FareGate, RouteNetwork};
use atms_core::mqtt::{Backoff, ClientError, ClientOptions, MqttClient, QoS};
use atms_core::{EarthModel, Route};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, oneshot};
use tokio::task::JoinHandle;
use tracing::info;

pub mod api;
pub mod bus;
pub mod error;
pub mod state;
mod users;

pub use error::ApiError;
pub use state::{AppState, BusEvent, TrainStatus, UserProfile};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_STALENESS: Duration = Duration::from_secs(15);

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("bus: {0}")]
    Bus(#[from] ClientError),
    #[error("bind: {0}")]
    Bind(std::io::Error),
    #[error("ledger: {0}")]
    Ledger(#[from] FareError),
    #[error("user store: {0}")]
    Users(String),
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub bind: SocketAddr,
    /// `host:port`
    pub broker: String,
    pub client_id: String,
    /// Ledger file; in-memory ticketing when `None`.
    pub ledger: Option<PathBuf>,
    /// Registered users and their tokens; in-memory when `None`.
    pub users: Option<PathBuf>,
    pub routes: Vec<Route>,
    pub fare: FareConfig,
    pub earth: EarthModel,
    pub staleness: Duration,
    pub ws_buffer: usize,
}

impl GatewayConfig {
    pub fn new(bind: SocketAddr, broker: impl Into<String>) -> Self {
        GatewayConfig {
            bind,
            broker: broker.into(),
            client_id: {
                static NEXT: AtomicU64 = AtomicU64::new(1);
                format!(
                    "gateway-{}-{}",
                    std::process::id(),
                    NEXT.fetch_add(1, Ordering::Relaxed)
                )
            },
            ledger: None,
            users: None,
            routes: Vec::new(),
            fare: FareConfig::default(),
            earth: EarthModel::default(),
            staleness: DEFAULT_STALENESS,
            ws_buffer: 4096,
        }
    }
}

pub struct GatewayHandle {
    local_addr: SocketAddr,
    state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    server: JoinHandle<()>,
    pipeline: JoinHandle<()>,
}

impl GatewayHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.local_addr, path)
    }

    /// Stops serving, drains open requests and leaves the bus.
    pub async fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        // Upgraded WebSocket connections do not hold up shutdown for long.
        if tokio::time::timeout(Duration::from_secs(2), &mut self.server)
            .await
            .is_err()
        {
            self.server.abort();
        }
        self.pipeline.abort();
        self.state.bus.disconnect().await;
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.server.abort();
        self.pipeline.abort();
    }
}

pub async fn start(config: GatewayConfig) -> Result<GatewayHandle, GatewayError> {
    let network = RouteNetwork::new(config.routes.clone(), config.earth);
    let fare = match &config.ledger {
        Some(path) => FareGate::open(config.fare.clone(), network, path)?,
        None => FareGate::new(config.fare.clone(), network),
    };
    let users = users::UserStore::open(config.users.clone()).map_err(GatewayError::Users)?;

    let options =
        ClientOptions::new(&config.broker, &config.client_id).with_reconnect(Backoff::default());
    let (bus, messages) = MqttClient::connect(options).await?;
    bus.subscribe("pts/#", QoS::AtLeastOnce).await?;

    let listener = TcpListener::bind(config.bind)
        .await
        .map_err(GatewayError::Bind)?;
    let local_addr = listener.local_addr().map_err(GatewayError::Bind)?;

    let (events, _) = broadcast::channel(config.ws_buffer);
    let state = Arc::new(AppState {
        users: RwLock::new(users),
        trains: RwLock::default(),
        occupancy: RwLock::default(),
        alarms: Mutex::new(AlarmRegistry::new(config.earth)),
        fare,
        metrics: Default::default(),
        events,
        bus,
        staleness: config.staleness,
    });

    let pipeline = tokio::spawn(bus::consume(state.clone(), messages));
    let app = api::router(state.clone());
    let (stop, stopped) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let serve = axum::serve(listener, app).with_graceful_shutdown(async {
            let _ = stopped.await;
        });
        if let Err(e) = serve.await {
            tracing::error!(error = %e, "http server stopped");
        }
    });
    info!(%local_addr, broker = config.broker, "gateway listening");
    Ok(GatewayHandle {
        local_addr,
        state,
        stop: Some(stop),
        server,
        pipeline,
    })
}
