//! Embedded TCP broker around [`BrokerState`].

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use bytes::BytesMut;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::OwnedReadHalf;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tracing::{debug, info};

use super::broker::{BrokerState, ConnId, Outbound};
use super::codec::{self, Decoded, Packet};
use super::inflight::RetryPolicy;

pub const DEFAULT_PORT: u16 = 1883;

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub bind: SocketAddr,
    pub retry: RetryPolicy,
    /// Largest Remaining Length accepted from clients.
    pub max_packet_size: usize,
    /// Time allowed between TCP accept and CONNECT.
    pub connect_timeout: Duration,
    pub tick: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        BrokerConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            retry: RetryPolicy::default(),
            max_packet_size: 1 << 20,
            connect_timeout: Duration::from_secs(10),
            tick: Duration::from_millis(100),
        }
    }
}

impl BrokerConfig {
    pub fn ephemeral() -> Self {
        BrokerConfig {
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            ..Default::default()
        }
    }
}

enum Event {
    Opened(ConnId, mpsc::UnboundedSender<Outgoing>),
    Packet(ConnId, Packet),
    Closed(ConnId),
}

enum Outgoing {
    Packet(Packet),
    Close,
}

/// A running broker. Dropping the handle leaves it running; call
/// [`BrokerHandle::shutdown`] to stop it and close every connection.
pub struct BrokerHandle {
    local_addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub async fn shutdown(mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let _ = (&mut self.task).await;
    }
}

pub async fn start(config: BrokerConfig) -> io::Result<BrokerHandle> {
    let listener = TcpListener::bind(config.bind).await?;
    let local_addr = listener.local_addr()?;
    let (stop_tx, stop_rx) = oneshot::channel();
    let task = tokio::spawn(run(listener, config, stop_rx));
    info!(%local_addr, "broker listening");
    Ok(BrokerHandle {
        local_addr,
        stop: Some(stop_tx),
        task,
    })
}

async fn run(listener: TcpListener, config: BrokerConfig, mut stop: oneshot::Receiver<()>) {
    let (events_tx, mut events) = mpsc::unbounded_channel::<Event>();
    let mut state = BrokerState::new(config.retry);
    let mut writers: HashMap<ConnId, mpsc::UnboundedSender<Outgoing>> = HashMap::new();
    let mut conn_tasks = tokio::task::JoinSet::new();
    let mut next_conn: ConnId = 1;
    let mut tick = tokio::time::interval(config.tick);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);

    loop {
        tokio::select! {
            _ = &mut stop => break,
            accepted = listener.accept() => {
                let Ok((stream, peer)) = accepted else { continue };
                let conn = next_conn;
                next_conn += 1;
                debug!(conn, %peer, "accepted");
                let _ = stream.set_nodelay(true);
                conn_tasks.spawn(connection(conn, stream, events_tx.clone(), config.clone()));
            }
            Some(event) = events.recv() => {
                let out = match event {
                    Event::Opened(conn, tx) => {
                        writers.insert(conn, tx);
                        Vec::new()
                    }
                    Event::Packet(conn, packet) => state.handle(conn, packet, Instant::now()),
                    Event::Closed(conn) => {
                        state.disconnect(conn);
                        writers.remove(&conn);
                        Vec::new()
                    }
                };
                apply(out, &mut writers);
            }
            _ = tick.tick() => {
                let out = state.tick(Instant::now());
                apply(out, &mut writers);
            }
            Some(_) = conn_tasks.join_next(), if !conn_tasks.is_empty() => {}
        }
    }
    conn_tasks.shutdown().await;
    info!("broker stopped");
}

fn apply(out: Vec<Outbound>, writers: &mut HashMap<ConnId, mpsc::UnboundedSender<Outgoing>>) {
    for action in out {
        match action {
            Outbound::Send(conn, packet) => {
                if let Some(w) = writers.get(&conn) {
                    let _ = w.send(Outgoing::Packet(packet));
                }
            }
            Outbound::Close(conn) => {
                if let Some(w) = writers.remove(&conn) {
                    let _ = w.send(Outgoing::Close);
                }
            }
        }
    }
}

async fn connection(
    conn: ConnId,
    stream: TcpStream,
    events: mpsc::UnboundedSender<Event>,
    config: BrokerConfig,
) {
    let (reader, mut writer) = stream.into_split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel();
    if events.send(Event::Opened(conn, out_tx)).is_err() {
        return;
    }

    let read_events = events.clone();
    let mut read_task = tokio::spawn(async move {
        let res = read_loop(conn, reader, &read_events, &config).await;
        if let Err(e) = res {
            debug!(conn, error = %e, "read loop ended");
        }
    });

    let mut buf = BytesMut::new();
    loop {
        tokio::select! {
            msg = out_rx.recv() => match msg {
                Some(Outgoing::Packet(p)) => {
                    buf.clear();
                    if codec::encode_into(&p, &mut buf).is_err() || writer.write_all(&buf).await.is_err() {
                        break;
                    }
                }
                Some(Outgoing::Close) | None => break,
            },
            _ = &mut read_task => break,
        }
    }
    read_task.abort();
    let _ = writer.shutdown().await;
    let _ = events.send(Event::Closed(conn));
}

async fn read_loop(
    conn: ConnId,
    mut reader: OwnedReadHalf,
    events: &mpsc::UnboundedSender<Event>,
    config: &BrokerConfig,
) -> io::Result<()> {
    let mut buf = BytesMut::with_capacity(4096);
    // Until CONNECT arrives the connect timeout applies; afterwards 1.5x
    // the client's keep-alive (0 disables it).
    let mut idle_limit = Some(config.connect_timeout);
    loop {
        loop {
            match codec::decode_limited(&buf, config.max_packet_size) {
                Ok(Decoded::Packet(packet, used)) => {
                    let _ = buf.split_to(used);
                    if let Packet::Connect { keep_alive_s, .. } = &packet {
                        idle_limit = (*keep_alive_s > 0)
                            .then(|| Duration::from_millis(*keep_alive_s as u64 * 1500));
                    }
                    if events.send(Event::Packet(conn, packet)).is_err() {
                        return Ok(());
                    }
                }
                Ok(Decoded::NeedMoreBytes) => break,
                Err(e) => {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, e));
                }
            }
        }
        let read = reader.read_buf(&mut buf);
        let n = match idle_limit {
            Some(limit) => tokio::time::timeout(limit, read)
                .await
                .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "keep-alive expired"))??,
            None => read.await?,
        };
        if n == 0 {
            return Ok(());
        }
    }
}
