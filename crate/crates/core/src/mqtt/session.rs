//! Transport-independent client session: packet ids, QoS 1 retransmission
//! and inbound acknowledgement.

use std::time::Instant;

use bytes::Bytes;

use super::codec::{ConnectReturnCode, Packet, Publish, QoS, SubAckCode};
use super::inflight::{Inflight, RetryPolicy};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEvent {
    ConnAck(ConnectReturnCode),
    /// A QoS 1 publish of ours was acknowledged.
    Acked(u16),
    SubAcked {
        packet_id: u16,
        codes: Vec<SubAckCode>,
    },
    UnsubAcked(u16),
    /// Message from the broker. Any required PUBACK is queued in `reply`.
    Message(Publish),
    PingResp,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("all packet ids are in flight")]
    IdsExhausted,
}

#[derive(Debug)]
pub struct ClientSession {
    client_id: String,
    inflight: Inflight,
    next_control_id: u16,
}

/// Result of [`ClientSession::poll_timeouts`].
#[derive(Debug, Default)]
pub struct Timeouts {
    pub retransmit: Vec<Packet>,
    pub failed: Vec<u16>,
}

impl ClientSession {
    pub fn new(client_id: impl Into<String>, policy: RetryPolicy) -> Self {
        ClientSession {
            client_id: client_id.into(),
            inflight: Inflight::new(policy),
            next_control_id: 1,
        }
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn connect_packet(&self, keep_alive_s: u16) -> Packet {
        Packet::Connect {
            client_id: self.client_id.clone(),
            keep_alive_s,
            clean_session: true,
        }
    }

    pub fn in_flight(&self) -> usize {
        self.inflight.len()
    }

    /// Builds a PUBLISH. QoS 1 publishes are tracked until acknowledged and
    /// their packet id is returned.
    pub fn publish(
        &mut self,
        topic: impl Into<String>,
        payload: Bytes,
        qos: QoS,
        retain: bool,
        now: Instant,
    ) -> Result<(Packet, Option<u16>), SessionError> {
        let mut publish = Publish {
            topic: topic.into(),
            payload,
            qos,
            packet_id: None,
            dup: false,
            retain,
        };
        match qos {
            QoS::AtMostOnce => Ok((Packet::Publish(publish), None)),
            QoS::AtLeastOnce => {
                let id = self
                    .inflight
                    .allocate_id()
                    .ok_or(SessionError::IdsExhausted)?;
                publish.packet_id = Some(id);
                Ok((self.inflight.track(publish, now), Some(id)))
            }
        }
    }

    fn control_id(&mut self) -> u16 {
        let id = self.next_control_id;
        self.next_control_id = self.next_control_id.checked_add(1).unwrap_or(1);
        id
    }

    pub fn subscribe(&mut self, filters: Vec<(String, QoS)>) -> (Packet, u16) {
        let packet_id = self.control_id();
        (Packet::Subscribe { packet_id, filters }, packet_id)
    }

    pub fn unsubscribe(&mut self, filters: Vec<String>) -> (Packet, u16) {
        let packet_id = self.control_id();
        (Packet::Unsubscribe { packet_id, filters }, packet_id)
    }

    /// Handles a packet from the broker. Packets that must be sent in
    /// response are appended to `reply`.
    pub fn handle(&mut self, packet: Packet, reply: &mut Vec<Packet>) -> Option<SessionEvent> {
        match packet {
            Packet::ConnAck { return_code, .. } => Some(SessionEvent::ConnAck(return_code)),
            Packet::PubAck { packet_id } => self
                .inflight
                .ack(packet_id)
                .then_some(SessionEvent::Acked(packet_id)),
            Packet::Publish(p) => {
                if let Some(packet_id) = p.packet_id {
                    reply.push(Packet::PubAck { packet_id });
                }
                Some(SessionEvent::Message(p))
            }
            Packet::SubAck {
                packet_id,
                return_codes,
            } => Some(SessionEvent::SubAcked {
                packet_id,
                codes: return_codes,
            }),
            Packet::UnsubAck { packet_id } => Some(SessionEvent::UnsubAcked(packet_id)),
            Packet::PingResp => Some(SessionEvent::PingResp),
            _ => None,
        }
    }

    pub fn next_deadline(&self) -> Option<Instant> {
        self.inflight.next_deadline()
    }

    pub fn poll_timeouts(&mut self, now: Instant) -> Timeouts {
        let e = self.inflight.expire(now);
        Timeouts {
            retransmit: e.retransmit,
            failed: e.failed,
        }
    }

    /// Everything still unacknowledged, marked as duplicates, for sending
    /// on a fresh connection.
    pub fn resend_all(&mut self, now: Instant) -> Vec<Packet> {
        self.inflight.resend_all(now)
    }

    /// Abandons all outstanding publishes and returns their ids.
    pub fn abandon_all(&mut self) -> Vec<u16> {
        self.inflight.drain_ids()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qos1_round_trip_through_ack() {
        let mut s = ClientSession::new("c", RetryPolicy::default());
        let now = Instant::now();
        let (p, id) = s
            .publish(
                "a/b",
                Bytes::from_static(b"x"),
                QoS::AtLeastOnce,
                false,
                now,
            )
            .unwrap();
        let id = id.unwrap();
        assert!(matches!(p, Packet::Publish(ref p) if p.packet_id == Some(id) && !p.dup));
        assert_eq!(s.in_flight(), 1);
        let mut reply = Vec::new();
        assert_eq!(
            s.handle(Packet::PubAck { packet_id: id }, &mut reply),
            Some(SessionEvent::Acked(id))
        );
        assert_eq!(s.handle(Packet::PubAck { packet_id: id }, &mut reply), None);
        assert!(reply.is_empty());
        assert_eq!(s.in_flight(), 0);
    }

    #[test]
    fn inbound_qos1_is_acked() {
        let mut s = ClientSession::new("c", RetryPolicy::default());
        let mut reply = Vec::new();
        let p = Publish {
            topic: "t".into(),
            payload: Bytes::new(),
            qos: QoS::AtLeastOnce,
            packet_id: Some(44),
            dup: false,
            retain: false,
        };
        assert!(matches!(
            s.handle(Packet::Publish(p), &mut reply),
            Some(SessionEvent::Message(_))
        ));
        assert_eq!(reply, vec![Packet::PubAck { packet_id: 44 }]);
    }

    #[test]
    fn qos0_is_untracked() {
        let mut s = ClientSession::new("c", RetryPolicy::default());
        let (_, id) = s
            .publish("a", Bytes::new(), QoS::AtMostOnce, false, Instant::now())
            .unwrap();
        assert_eq!(id, None);
        assert_eq!(s.in_flight(), 0);
        assert_eq!(s.next_deadline(), None);
    }
}
