//! Transport-independent broker state machine.
//!
//! The network layer assigns every accepted socket a [`ConnId`], feeds decoded
//! packets into [`BrokerState::handle`], and writes back whatever
//! [`Outbound`] actions come out. Timers are driven through
//! [`BrokerState::tick`].

use std::collections::HashMap;
use std::time::Instant;

use tracing::{debug, warn};

use super::codec::{ConnectReturnCode, Packet, Publish, QoS, SubAckCode};
use super::inflight::{Inflight, RetryPolicy};
use crate::topic::{self, Channel, TopicFilter};

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outbound {
    Send(ConnId, Packet),
    Close(ConnId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub client_id: String,
    pub filter: TopicFilter,
    pub qos: QoS,
}

/// A publish routed to one client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub client_id: String,
    pub conn: ConnId,
    pub publish: Publish,
}

#[derive(Debug)]
struct Session {
    conn: ConnId,
    inflight: Inflight,
}

#[derive(Debug)]
pub struct BrokerState {
    policy: RetryPolicy,
    sessions: HashMap<String, Session>,
    conns: HashMap<ConnId, String>,
    subscriptions: Vec<Subscription>,
    retained: HashMap<String, Publish>,
    generated_ids: u64,
}

/// Only `status` channel topics keep a retained message.
fn retainable(topic: &str) -> bool {
    topic::parse(topic).is_ok_and(|a| a.channel == Channel::Status)
}

impl BrokerState {
    pub fn new(policy: RetryPolicy) -> Self {
        BrokerState {
            policy,
            sessions: HashMap::new(),
            conns: HashMap::new(),
            subscriptions: Vec::new(),
            retained: HashMap::new(),
            generated_ids: 0,
        }
    }

    pub fn subscriptions(&self) -> &[Subscription] {
        &self.subscriptions
    }

    pub fn retained(&self, topic: &str) -> Option<&Publish> {
        self.retained.get(topic)
    }

    pub fn is_connected(&self, client_id: &str) -> bool {
        self.sessions.contains_key(client_id)
    }

    pub fn client_of(&self, conn: ConnId) -> Option<&str> {
        self.conns.get(&conn).map(String::as_str)
    }

    /// Processes one packet from `conn`. The first packet on a connection
    /// must be CONNECT; anything else closes it.
    pub fn handle(&mut self, conn: ConnId, packet: Packet, now: Instant) -> Vec<Outbound> {
        let Some(client_id) = self.conns.get(&conn).cloned() else {
            return match packet {
                Packet::Connect {
                    client_id,
                    clean_session,
                    ..
                } => self.connect(conn, client_id, clean_session),
                other => {
                    debug!(conn, ?other, "first packet was not CONNECT");
                    vec![Outbound::Close(conn)]
                }
            };
        };
        match packet {
            Packet::Connect { .. } => {
                // A second CONNECT is a protocol violation.
                self.disconnect(conn);
                vec![Outbound::Close(conn)]
            }
            Packet::Publish(publish) => {
                let mut out = Vec::new();
                if let Some(id) = publish.packet_id {
                    out.push(Outbound::Send(conn, Packet::PubAck { packet_id: id }));
                }
                out.extend(
                    self.dispatch(publish, now)
                        .into_iter()
                        .map(|d| Outbound::Send(d.conn, Packet::Publish(d.publish))),
                );
                out
            }
            Packet::PubAck { packet_id } => {
                if let Some(s) = self.sessions.get_mut(&client_id) {
                    s.inflight.ack(packet_id);
                }
                Vec::new()
            }
            Packet::Subscribe { packet_id, filters } => {
                self.subscribe(conn, &client_id, packet_id, filters, now)
            }
            Packet::Unsubscribe { packet_id, filters } => {
                self.subscriptions.retain(|s| {
                    s.client_id != client_id || !filters.iter().any(|f| *f == s.filter.to_string())
                });
                vec![Outbound::Send(conn, Packet::UnsubAck { packet_id })]
            }
            Packet::PingReq => vec![Outbound::Send(conn, Packet::PingResp)],
            Packet::Disconnect => {
                self.disconnect(conn);
                vec![Outbound::Close(conn)]
            }
            other => {
                debug!(conn, ?other, "unexpected packet from client");
                self.disconnect(conn);
                vec![Outbound::Close(conn)]
            }
        }
    }

    fn connect(&mut self, conn: ConnId, client_id: String, clean_session: bool) -> Vec<Outbound> {
        let client_id = if client_id.is_empty() {
            if !clean_session {
                return vec![
                    Outbound::Send(
                        conn,
                        Packet::ConnAck {
                            session_present: false,
                            return_code: ConnectReturnCode::IdentifierRejected,
                        },
                    ),
                    Outbound::Close(conn),
                ];
            }
            self.generated_ids += 1;
            format!("auto-{}", self.generated_ids)
        } else {
            client_id
        };

        let mut out = Vec::new();
        // Sessions are never resumed: a reconnect replaces the old
        // connection and starts from an empty subscription set.
        if let Some(old) = self.sessions.remove(&client_id) {
            self.conns.remove(&old.conn);
            out.push(Outbound::Close(old.conn));
        }
        self.subscriptions.retain(|s| s.client_id != client_id);
        self.sessions.insert(
            client_id.clone(),
            Session {
                conn,
                inflight: Inflight::new(self.policy),
            },
        );
        self.conns.insert(conn, client_id);
        out.push(Outbound::Send(
            conn,
            Packet::ConnAck {
                session_present: false,
                return_code: ConnectReturnCode::Accepted,
            },
        ));
        out
    }

    fn subscribe(
        &mut self,
        conn: ConnId,
        client_id: &str,
        packet_id: u16,
        filters: Vec<(String, QoS)>,
        now: Instant,
    ) -> Vec<Outbound> {
        let mut codes = Vec::with_capacity(filters.len());
        let mut accepted = Vec::new();
        for (raw, qos) in filters {
            match TopicFilter::parse(&raw) {
                Ok(filter) => {
                    match self
                        .subscriptions
                        .iter_mut()
                        .find(|s| s.client_id == client_id && s.filter == filter)
                    {
                        Some(existing) => existing.qos = qos,
                        None => self.subscriptions.push(Subscription {
                            client_id: client_id.to_string(),
                            filter: filter.clone(),
                            qos,
                        }),
                    }
                    codes.push(SubAckCode::Granted(qos));
                    accepted.push((filter, qos));
                }
                Err(e) => {
                    debug!(client_id, filter = raw, error = %e, "rejected subscription");
                    codes.push(SubAckCode::Failure);
                }
            }
        }
        let mut out = vec![Outbound::Send(
            conn,
            Packet::SubAck {
                packet_id,
                return_codes: codes,
            },
        )];

        let retained: Vec<Publish> = self
            .retained
            .values()
            .filter(|p| accepted.iter().any(|(f, _)| f.matches(&p.topic)))
            .cloned()
            .collect();
        for publish in retained {
            let granted = accepted
                .iter()
                .filter(|(f, _)| f.matches(&publish.topic))
                .map(|(_, q)| *q)
                .max()
                .unwrap_or(QoS::AtMostOnce);
            if let Some(d) = self.deliver_to(client_id, publish, granted, true, now) {
                out.push(Outbound::Send(d.conn, Packet::Publish(d.publish)));
            }
        }
        out
    }

    /// Routes `publish` to every connected client holding a matching
    /// subscription. A client with several matching filters receives one copy
    /// at the highest granted QoS, capped by the publish QoS.
    pub fn dispatch(&mut self, publish: Publish, now: Instant) -> Vec<Delivery> {
        if publish.retain && retainable(&publish.topic) {
            if publish.payload.is_empty() {
                self.retained.remove(&publish.topic);
            } else {
                let mut stored = publish.clone();
                stored.dup = false;
                self.retained.insert(publish.topic.clone(), stored);
            }
        }

        let mut granted: Vec<(String, QoS)> = Vec::new();
        for s in &self.subscriptions {
            if !s.filter.matches(&publish.topic) {
                continue;
            }
            match granted.iter_mut().find(|(c, _)| *c == s.client_id) {
                Some((_, q)) => *q = (*q).max(s.qos),
                None => granted.push((s.client_id.clone(), s.qos)),
            }
        }
        granted
            .into_iter()
            .filter_map(|(client, qos)| self.deliver_to(&client, publish.clone(), qos, false, now))
            .collect()
    }

    fn deliver_to(
        &mut self,
        client_id: &str,
        mut publish: Publish,
        granted: QoS,
        retain: bool,
        now: Instant,
    ) -> Option<Delivery> {
        let session = self.sessions.get_mut(client_id)?;
        publish.qos = publish.qos.min(granted);
        publish.retain = retain;
        publish.dup = false;
        publish.packet_id = None;
        if publish.qos == QoS::AtLeastOnce {
            let Some(id) = session.inflight.allocate_id() else {
                warn!(client_id, "no free packet id, dropping delivery");
                return None;
            };
            publish.packet_id = Some(id);
            session.inflight.track(publish.clone(), now);
        }
        Some(Delivery {
            client_id: client_id.to_string(),
            conn: session.conn,
            publish,
        })
    }

    /// Retransmits unacknowledged QoS 1 deliveries.
    pub fn tick(&mut self, now: Instant) -> Vec<Outbound> {
        let mut out = Vec::new();
        for (client_id, session) in &mut self.sessions {
            let expired = session.inflight.expire(now);
            for id in expired.failed {
                warn!(
                    client_id,
                    packet_id = id,
                    "delivery abandoned after retransmits"
                );
            }
            out.extend(
                expired
                    .retransmit
                    .into_iter()
                    .map(|p| Outbound::Send(session.conn, p)),
            );
        }
        out
    }

    /// Forgets the connection. Clean sessions discard their subscriptions.
    pub fn disconnect(&mut self, conn: ConnId) {
        if let Some(client_id) = self.conns.remove(&conn) {
            if self
                .sessions
                .get(&client_id)
                .is_some_and(|s| s.conn == conn)
            {
                self.sessions.remove(&client_id);
                self.subscriptions.retain(|s| s.client_id != client_id);
            }
        }
    }
}
