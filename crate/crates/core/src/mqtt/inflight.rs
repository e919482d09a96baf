use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use super::codec::{Packet, Publish, QoS};

/// Acknowledgement timing shared by broker and client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub ack_timeout: Duration,
    /// Retransmissions after the first send before giving up.
    pub max_retransmits: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            ack_timeout: Duration::from_secs(2),
            max_retransmits: 3,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    publish: Publish,
    sent_at: Instant,
    retransmits: u32,
}

/// Outstanding QoS 1 publishes awaiting PUBACK, keyed by packet id.
#[derive(Debug, Clone)]
pub(crate) struct Inflight {
    policy: RetryPolicy,
    next_id: u16,
    entries: BTreeMap<u16, Entry>,
}

pub(crate) struct Expired {
    pub retransmit: Vec<Packet>,
    pub failed: Vec<u16>,
}

impl Inflight {
    pub fn new(policy: RetryPolicy) -> Self {
        Inflight {
            policy,
            next_id: 1,
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Next free non-zero packet id, or `None` when all 65535 are in flight.
    pub fn allocate_id(&mut self) -> Option<u16> {
        if self.entries.len() >= u16::MAX as usize {
            return None;
        }
        loop {
            let id = self.next_id;
            self.next_id = self.next_id.checked_add(1).unwrap_or(1);
            if !self.entries.contains_key(&id) {
                return Some(id);
            }
        }
    }

    /// Registers `publish` (which must carry a packet id) and returns the
    /// packet to send.
    pub fn track(&mut self, mut publish: Publish, now: Instant) -> Packet {
        debug_assert_eq!(publish.qos, QoS::AtLeastOnce);
        publish.dup = false;
        let id = publish.packet_id.expect("qos 1 publish without packet id");
        self.entries.insert(
            id,
            Entry {
                publish: publish.clone(),
                sent_at: now,
                retransmits: 0,
            },
        );
        Packet::Publish(publish)
    }

    pub fn ack(&mut self, packet_id: u16) -> bool {
        self.entries.remove(&packet_id).is_some()
    }

    pub fn next_deadline(&self) -> Option<Instant> {
        self.entries
            .values()
            .map(|e| e.sent_at + self.policy.ack_timeout)
            .min()
    }

    /// Retransmits every entry whose timer elapsed (with `dup` set) and drops
    /// the ones that already used their retransmission budget.
    pub fn expire(&mut self, now: Instant) -> Expired {
        let mut out = Expired {
            retransmit: Vec::new(),
            failed: Vec::new(),
        };
        let timeout = self.policy.ack_timeout;
        let budget = self.policy.max_retransmits;
        self.entries.retain(|id, e| {
            if now < e.sent_at + timeout {
                return true;
            }
            if e.retransmits >= budget {
                out.failed.push(*id);
                return false;
            }
            e.retransmits += 1;
            e.sent_at = now;
            let mut p = e.publish.clone();
            p.dup = true;
            out.retransmit.push(Packet::Publish(p));
            true
        });
        out
    }

    /// Resends everything outstanding after a reconnect, restarting timers
    /// and budgets.
    pub fn resend_all(&mut self, now: Instant) -> Vec<Packet> {
        self.entries
            .values_mut()
            .map(|e| {
                e.sent_at = now;
                e.retransmits = 0;
                let mut p = e.publish.clone();
                p.dup = true;
                Packet::Publish(p)
            })
            .collect()
    }

    pub fn drain_ids(&mut self) -> Vec<u16> {
        std::mem::take(&mut self.entries).into_keys().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(id: u16) -> Publish {
        Publish {
            topic: "a".into(),
            payload: Default::default(),
            qos: QoS::AtLeastOnce,
            packet_id: Some(id),
            dup: false,
            retain: false,
        }
    }

    #[test]
    fn budget_then_failure() {
        let policy = RetryPolicy::default();
        let mut inflight = Inflight::new(policy);
        let t0 = Instant::now();
        inflight.track(p(1), t0);
        assert!(inflight
            .expire(t0 + Duration::from_millis(1999))
            .retransmit
            .is_empty());
        let mut t = t0;
        for _ in 0..3 {
            t += policy.ack_timeout;
            let e = inflight.expire(t);
            assert_eq!(e.retransmit.len(), 1);
            assert!(matches!(&e.retransmit[0], Packet::Publish(p) if p.dup));
        }
        t += policy.ack_timeout;
        let e = inflight.expire(t);
        assert_eq!(e.failed, vec![1]);
        assert_eq!(inflight.len(), 0);
    }

    #[test]
    fn ids_skip_zero_and_busy() {
        let mut inflight = Inflight::new(RetryPolicy::default());
        inflight.next_id = u16::MAX;
        let now = Instant::now();
        assert_eq!(inflight.allocate_id(), Some(u16::MAX));
        inflight.track(p(1), now);
        assert_eq!(inflight.allocate_id(), Some(2));
    }
}
