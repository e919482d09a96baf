//! TCP forwarder that delays every byte by a fixed one-way latency.
//!
//! Loopback connects complete instantly, so the proxy also charges the
//! three-way handshake: bytes from the client cannot leave before
//! `accept + 2 * delay`, as if SYN and SYN-ACK had crossed the link first.

use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use bytes::Bytes;
use rand::Rng;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::{JoinHandle, JoinSet};
use tokio::time::Instant;
use tracing::debug;

#[derive(Debug, Clone, Copy, Default)]
pub struct ProxyConfig {
    pub one_way_delay: Duration,
    /// Extra uniform delay in `[0, jitter]` per chunk. Order is preserved.
    pub jitter: Duration,
    /// Charge the connection handshake on each new connection.
    pub emulate_handshake: bool,
}

impl ProxyConfig {
    pub fn new(one_way_delay: Duration) -> Self {
        ProxyConfig {
            one_way_delay,
            jitter: Duration::ZERO,
            emulate_handshake: true,
        }
    }
}

/// A running proxy. Shutting it down (or dropping it) closes every
/// forwarded connection.
#[derive(Debug)]
pub struct DelayProxy {
    local_addr: SocketAddr,
    task: JoinHandle<()>,
}

impl DelayProxy {
    pub async fn start(
        listen: SocketAddr,
        target: impl Into<String>,
        config: ProxyConfig,
    ) -> io::Result<Self> {
        let listener = TcpListener::bind(listen).await?;
        let local_addr = listener.local_addr()?;
        let target = target.into();
        let task = tokio::spawn(async move {
            let mut conns = JoinSet::new();
            loop {
                tokio::select! {
                    accepted = listener.accept() => {
                        let Ok((client, _)) = accepted else { continue };
                        conns.spawn(forward(client, target.clone(), config));
                    }
                    Some(_) = conns.join_next(), if !conns.is_empty() => {}
                }
            }
        });
        Ok(DelayProxy { local_addr, task })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn shutdown(self) {
        self.task.abort();
    }
}

impl Drop for DelayProxy {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn forward(client: TcpStream, target: String, config: ProxyConfig) {
    let accepted = Instant::now();
    let upstream = match TcpStream::connect(&target).await {
        Ok(s) => s,
        Err(e) => {
            debug!(target, error = %e, "upstream connect failed");
            return;
        }
    };
    let _ = client.set_nodelay(true);
    let _ = upstream.set_nodelay(true);
    let (cr, cw) = client.into_split();
    let (ur, uw) = upstream.into_split();
    let hold = if config.emulate_handshake {
        accepted + config.one_way_delay * 2
    } else {
        accepted
    };
    tokio::join!(pipe(cr, uw, config, hold), pipe(ur, cw, config, accepted));
}

async fn pipe(
    mut from: OwnedReadHalf,
    mut to: OwnedWriteHalf,
    config: ProxyConfig,
    not_before: Instant,
) {
    let (tx, mut rx) = mpsc::unbounded_channel::<(Instant, Bytes)>();
    let reader = async move {
        let mut buf = vec![0u8; 16 * 1024];
        let mut last_due = not_before;
        while let Ok(n) = from.read(&mut buf).await {
            if n == 0 {
                break;
            }
            let jitter = if config.jitter.is_zero() {
                Duration::ZERO
            } else {
                config.jitter.mul_f64(rand::rng().random::<f64>())
            };
            let due =
                (Instant::now().max(not_before) + config.one_way_delay + jitter).max(last_due);
            last_due = due;
            if tx.send((due, Bytes::copy_from_slice(&buf[..n]))).is_err() {
                break;
            }
        }
    };
    let writer = async move {
        while let Some((due, chunk)) = rx.recv().await {
            tokio::time::sleep_until(due).await;
            if to.write_all(&chunk).await.is_err() {
                return;
            }
        }
        let _ = to.shutdown().await;
    };
    tokio::join!(reader, writer);
}
