//! Async MQTT client.
//!
//! One background task owns the socket and the [`ClientSession`]; the
//! cloneable [`MqttClient`] handle talks to it over a channel, so publishes
//! from all clones are totally ordered. With reconnect enabled, a dropped
//! connection is re-established with exponential backoff, subscriptions are
//! renewed and unacknowledged QoS 1 publishes are resent.

use std::collections::HashMap;
use std::io;
use std::time::{Duration, Instant};

use bytes::{Bytes, BytesMut};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::{mpsc, oneshot};
use tracing::{debug, warn};

use super::codec::{self, ConnectReturnCode, Decoded, Packet, QoS, SubAckCode};
use super::inflight::RetryPolicy;
use super::session::{ClientSession, SessionEvent};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("not connected")]
    NotConnected,
    #[error("no PUBACK for packet {0} after retransmissions")]
    AckTimeout(u16),
    #[error("broker refused connection: {0:?}")]
    Refused(ConnectReturnCode),
    #[error("connect timed out")]
    ConnectTimeout,
    #[error("subscription to `{0}` rejected")]
    SubscribeRejected(String),
    #[error("encode: {0}")]
    Encode(#[from] codec::EncodeError),
    #[error("decode: {0}")]
    Decode(#[from] codec::DecodeError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("all packet ids in flight")]
    IdsExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            initial: Duration::from_millis(100),
            max: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    /// `host:port`
    pub broker: String,
    pub client_id: String,
    pub keep_alive_s: u16,
    pub retry: RetryPolicy,
    pub connect_timeout: Duration,
    /// `None` makes a lost connection terminal.
    pub reconnect: Option<Backoff>,
}

impl ClientOptions {
    pub fn new(broker: impl Into<String>, client_id: impl Into<String>) -> Self {
        ClientOptions {
            broker: broker.into(),
            client_id: client_id.into(),
            keep_alive_s: 30,
            retry: RetryPolicy::default(),
            connect_timeout: Duration::from_secs(5),
            reconnect: None,
        }
    }

    pub fn with_reconnect(mut self, backoff: Backoff) -> Self {
        self.reconnect = Some(backoff);
        self
    }
}

/// Message received on a subscription.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub topic: String,
    pub payload: Bytes,
    pub qos: QoS,
    pub retain: bool,
}

/// Proof that a publish left the client (QoS 0) or was acknowledged by the
/// broker (QoS 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Receipt {
    pub qos: QoS,
    pub packet_id: Option<u16>,
}

enum Command {
    Publish {
        topic: String,
        payload: Bytes,
        qos: QoS,
        retain: bool,
        reply: oneshot::Sender<Result<Receipt, ClientError>>,
    },
    Subscribe {
        filter: String,
        qos: QoS,
        reply: oneshot::Sender<Result<QoS, ClientError>>,
    },
    Disconnect {
        reply: oneshot::Sender<()>,
    },
}

#[derive(Clone)]
pub struct MqttClient {
    commands: mpsc::UnboundedSender<Command>,
}

impl std::fmt::Debug for MqttClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MqttClient").finish_non_exhaustive()
    }
}

impl MqttClient {
    /// Connects and waits for CONNACK. Incoming messages arrive on the
    /// returned receiver.
    pub async fn connect(
        options: ClientOptions,
    ) -> Result<(MqttClient, mpsc::UnboundedReceiver<Message>), ClientError> {
        let session = ClientSession::new(options.client_id.clone(), options.retry);
        let stream = open(&options, &session).await?;
        let (commands, command_rx) = mpsc::unbounded_channel();
        let (message_tx, message_rx) = mpsc::unbounded_channel();
        let actor = Actor {
            options,
            session,
            messages: message_tx,
            publish_waiters: HashMap::new(),
            sub_waiters: HashMap::new(),
            subscriptions: Vec::new(),
            last_sent: Instant::now(),
        };
        tokio::spawn(actor.run(stream, command_rx));
        Ok((MqttClient { commands }, message_rx))
    }

    pub async fn publish(
        &self,
        topic: impl Into<String>,
        payload: impl Into<Bytes>,
        qos: QoS,
    ) -> Result<Receipt, ClientError> {
        self.send_publish(topic.into(), payload.into(), qos, false)
            .await
    }

    pub async fn publish_retained(
        &self,
        topic: impl Into<String>,
        payload: impl Into<Bytes>,
        qos: QoS,
    ) -> Result<Receipt, ClientError> {
        self.send_publish(topic.into(), payload.into(), qos, true)
            .await
    }

    async fn send_publish(
        &self,
        topic: String,
        payload: Bytes,
        qos: QoS,
        retain: bool,
    ) -> Result<Receipt, ClientError> {
        let (reply, rx) = oneshot::channel();
        self.commands
            .send(Command::Publish {
                topic,
                payload,
                qos,
                retain,
                reply,
            })
            .map_err(|_| ClientError::NotConnected)?;
        rx.await.map_err(|_| ClientError::NotConnected)?
    }

    /// Subscribes and returns the granted QoS.
    pub async fn subscribe(&self, filter: impl Into<String>, qos: QoS) -> Result<QoS, ClientError> {
        let (reply, rx) = oneshot::channel();
        self.commands
            .send(Command::Subscribe {
                filter: filter.into(),
                qos,
                reply,
            })
            .map_err(|_| ClientError::NotConnected)?;
        rx.await.map_err(|_| ClientError::NotConnected)?
    }

    /// Sends DISCONNECT and stops the background task. Later calls fail
    /// with [`ClientError::NotConnected`].
    pub async fn disconnect(&self) {
        let (reply, rx) = oneshot::channel();
        if self.commands.send(Command::Disconnect { reply }).is_ok() {
            let _ = rx.await;
        }
    }

    pub fn is_closed(&self) -> bool {
        self.commands.is_closed()
    }
}

async fn write_packet(stream: &mut TcpStream, packet: &Packet) -> Result<(), ClientError> {
    let bytes = codec::encode(packet)?;
    stream.write_all(&bytes).await?;
    Ok(())
}

/// TCP connect, CONNECT, wait for CONNACK.
async fn open(options: &ClientOptions, session: &ClientSession) -> Result<TcpStream, ClientError> {
    let handshake = async {
        let mut stream = TcpStream::connect(&options.broker).await?;
        stream.set_nodelay(true)?;
        write_packet(&mut stream, &session.connect_packet(options.keep_alive_s)).await?;
        let mut buf = BytesMut::with_capacity(16);
        loop {
            if let Decoded::Packet(packet, _) = codec::decode(&buf)? {
                return match packet {
                    Packet::ConnAck {
                        return_code: ConnectReturnCode::Accepted,
                        ..
                    } => Ok(stream),
                    Packet::ConnAck { return_code, .. } => Err(ClientError::Refused(return_code)),
                    _ => Err(ClientError::Io(io::Error::new(
                        io::ErrorKind::InvalidData,
                        "expected CONNACK",
                    ))),
                };
            }
            if stream.read_buf(&mut buf).await? == 0 {
                return Err(ClientError::Io(io::ErrorKind::UnexpectedEof.into()));
            }
        }
    };
    tokio::time::timeout(options.connect_timeout, handshake)
        .await
        .map_err(|_| ClientError::ConnectTimeout)?
}

struct Actor {
    options: ClientOptions,
    session: ClientSession,
    messages: mpsc::UnboundedSender<Message>,
    publish_waiters: HashMap<u16, oneshot::Sender<Result<Receipt, ClientError>>>,
    sub_waiters: HashMap<u16, (String, oneshot::Sender<Result<QoS, ClientError>>)>,
    subscriptions: Vec<(String, QoS)>,
    last_sent: Instant,
}

enum Flow {
    Continue,
    ConnectionLost,
    Stop,
}

impl Actor {
    async fn run(mut self, stream: TcpStream, mut commands: mpsc::UnboundedReceiver<Command>) {
        let mut stream = Some(stream);
        let mut backoff = self.options.reconnect.map(|b| b.initial);
        let mut retry_at = Instant::now();
        loop {
            match stream.as_mut() {
                Some(s) => match self.connected(s, &mut commands).await {
                    Flow::Continue => {}
                    Flow::Stop => break,
                    Flow::ConnectionLost => {
                        stream = None;
                        if self.options.reconnect.is_none() {
                            break;
                        }
                        debug!(
                            client = self.session.client_id(),
                            "connection lost, reconnecting"
                        );
                        retry_at = Instant::now();
                    }
                },
                None => {
                    tokio::select! {
                        cmd = commands.recv() => match cmd {
                            None => break,
                            Some(cmd) => {
                                if let Flow::Stop = self.command_offline(cmd) {
                                    break;
                                }
                            }
                        },
                        _ = tokio::time::sleep_until(retry_at.into()) => {
                            match open(&self.options, &self.session).await {
                                Ok(mut s) => match self.resume(&mut s).await {
                                    Ok(()) => {
                                        backoff = self.options.reconnect.map(|b| b.initial);
                                        stream = Some(s);
                                    }
                                    Err(e) => warn!(error = %e, "resume failed"),
                                },
                                Err(e) => {
                                    let (Some(delay), Some(policy)) = (backoff, self.options.reconnect) else { break };
                                    debug!(error = %e, ?delay, "reconnect failed");
                                    retry_at = Instant::now() + delay;
                                    backoff = Some((delay * 2).min(policy.max));
                                }
                            }
                        }
                    }
                }
            }
        }
        self.fail_all();
    }

    fn fail_all(&mut self) {
        for id in self.session.abandon_all() {
            if let Some(w) = self.publish_waiters.remove(&id) {
                let _ = w.send(Err(ClientError::NotConnected));
            }
        }
        for (_, (_, w)) in self.sub_waiters.drain() {
            let _ = w.send(Err(ClientError::NotConnected));
        }
    }

    /// Re-subscribes and resends outstanding publishes on a fresh socket.
    async fn resume(&mut self, stream: &mut TcpStream) -> Result<(), ClientError> {
        if !self.subscriptions.is_empty() {
            let (packet, _) = self.session.subscribe(self.subscriptions.clone());
            write_packet(stream, &packet).await?;
        }
        for packet in self.session.resend_all(Instant::now()) {
            write_packet(stream, &packet).await?;
        }
        self.last_sent = Instant::now();
        Ok(())
    }

    fn command_offline(&mut self, cmd: Command) -> Flow {
        match cmd {
            Command::Publish {
                topic,
                payload,
                qos: QoS::AtLeastOnce,
                retain,
                reply,
            } => {
                // Queued; sent on reconnect.
                match self
                    .session
                    .publish(topic, payload, QoS::AtLeastOnce, retain, Instant::now())
                {
                    Ok((_, Some(id))) => {
                        self.publish_waiters.insert(id, reply);
                    }
                    _ => {
                        let _ = reply.send(Err(ClientError::IdsExhausted));
                    }
                }
                Flow::Continue
            }
            Command::Publish { reply, .. } => {
                let _ = reply.send(Err(ClientError::NotConnected));
                Flow::Continue
            }
            Command::Subscribe { reply, .. } => {
                let _ = reply.send(Err(ClientError::NotConnected));
                Flow::Continue
            }
            Command::Disconnect { reply } => {
                let _ = reply.send(());
                Flow::Stop
            }
        }
    }

    async fn connected(
        &mut self,
        stream: &mut TcpStream,
        commands: &mut mpsc::UnboundedReceiver<Command>,
    ) -> Flow {
        let mut buf = BytesMut::with_capacity(4096);
        loop {
            let keep_alive = (self.options.keep_alive_s > 0)
                .then(|| self.last_sent + Duration::from_secs(self.options.keep_alive_s as u64));
            let deadline = [self.session.next_deadline(), keep_alive]
                .into_iter()
                .flatten()
                .min()
                .unwrap_or_else(|| Instant::now() + Duration::from_secs(3600));

            let flow = tokio::select! {
                cmd = commands.recv() => match cmd {
                    None => {
                        let _ = write_packet(stream, &Packet::Disconnect).await;
                        Flow::Stop
                    }
                    Some(cmd) => self.command(stream, cmd).await,
                },
                read = stream.read_buf(&mut buf) => match read {
                    Ok(0) | Err(_) => Flow::ConnectionLost,
                    Ok(_) => self.drain(stream, &mut buf).await,
                },
                _ = tokio::time::sleep_until(deadline.into()) => self.timers(stream).await,
            };
            match flow {
                Flow::Continue => {}
                other => return other,
            }
        }
    }

    async fn send(&mut self, stream: &mut TcpStream, packet: &Packet) -> Result<(), ClientError> {
        write_packet(stream, packet).await?;
        self.last_sent = Instant::now();
        Ok(())
    }

    async fn command(&mut self, stream: &mut TcpStream, cmd: Command) -> Flow {
        match cmd {
            Command::Publish {
                topic,
                payload,
                qos,
                retain,
                reply,
            } => {
                let (packet, id) =
                    match self
                        .session
                        .publish(topic, payload, qos, retain, Instant::now())
                    {
                        Ok(v) => v,
                        Err(_) => {
                            let _ = reply.send(Err(ClientError::IdsExhausted));
                            return Flow::Continue;
                        }
                    };
                if let Some(id) = id {
                    self.publish_waiters.insert(id, reply);
                    if self.send(stream, &packet).await.is_err() {
                        return Flow::ConnectionLost;
                    }
                } else {
                    match self.send(stream, &packet).await {
                        Ok(()) => {
                            let _ = reply.send(Ok(Receipt {
                                qos: QoS::AtMostOnce,
                                packet_id: None,
                            }));
                        }
                        Err(e) => {
                            let _ = reply.send(Err(e));
                            return Flow::ConnectionLost;
                        }
                    }
                }
                Flow::Continue
            }
            Command::Subscribe { filter, qos, reply } => {
                let (packet, id) = self.session.subscribe(vec![(filter.clone(), qos)]);
                self.sub_waiters.insert(id, (filter, reply));
                if self.send(stream, &packet).await.is_err() {
                    return Flow::ConnectionLost;
                }
                Flow::Continue
            }
            Command::Disconnect { reply } => {
                let _ = self.send(stream, &Packet::Disconnect).await;
                let _ = stream.shutdown().await;
                let _ = reply.send(());
                Flow::Stop
            }
        }
    }

    async fn drain(&mut self, stream: &mut TcpStream, buf: &mut BytesMut) -> Flow {
        loop {
            let packet = match codec::decode(buf) {
                Ok(Decoded::Packet(p, used)) => {
                    let _ = buf.split_to(used);
                    p
                }
                Ok(Decoded::NeedMoreBytes) => return Flow::Continue,
                Err(e) => {
                    warn!(error = %e, "malformed packet from broker");
                    return Flow::ConnectionLost;
                }
            };
            let mut replies = Vec::new();
            let event = self.session.handle(packet, &mut replies);
            for r in &replies {
                if self.send(stream, r).await.is_err() {
                    return Flow::ConnectionLost;
                }
            }
            match event {
                Some(SessionEvent::Acked(id)) => {
                    if let Some(w) = self.publish_waiters.remove(&id) {
                        let _ = w.send(Ok(Receipt {
                            qos: QoS::AtLeastOnce,
                            packet_id: Some(id),
                        }));
                    }
                }
                Some(SessionEvent::Message(p)) => {
                    let _ = self.messages.send(Message {
                        topic: p.topic,
                        payload: p.payload,
                        qos: p.qos,
                        retain: p.retain,
                    });
                }
                Some(SessionEvent::SubAcked { packet_id, codes }) => {
                    if let Some((filter, w)) = self.sub_waiters.remove(&packet_id) {
                        let result = match codes.first() {
                            Some(SubAckCode::Granted(q)) => {
                                let q = *q;
                                match self.subscriptions.iter_mut().find(|(f, _)| *f == filter) {
                                    Some(existing) => existing.1 = q,
                                    None => self.subscriptions.push((filter, q)),
                                }
                                Ok(q)
                            }
                            _ => Err(ClientError::SubscribeRejected(filter)),
                        };
                        let _ = w.send(result);
                    }
                }
                _ => {}
            }
        }
    }

    async fn timers(&mut self, stream: &mut TcpStream) -> Flow {
        let now = Instant::now();
        let t = self.session.poll_timeouts(now);
        for id in t.failed {
            if let Some(w) = self.publish_waiters.remove(&id) {
                let _ = w.send(Err(ClientError::AckTimeout(id)));
            }
        }
        for packet in &t.retransmit {
            if self.send(stream, packet).await.is_err() {
                return Flow::ConnectionLost;
            }
        }
        let keep_alive = Duration::from_secs(self.options.keep_alive_s as u64);
        if self.options.keep_alive_s > 0
            && now >= self.last_sent + keep_alive
            && self.send(stream, &Packet::PingReq).await.is_err()
        {
            return Flow::ConnectionLost;
        }
        Flow::Continue
    }
}
