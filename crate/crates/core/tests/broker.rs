//! Broker routing: at-least-once over a lossy link (simulated, no sockets)
//! and end-to-end behaviour over TCP.

use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

use atms_core::mqtt::codec::ConnectReturnCode;
use atms_core::mqtt::server::{self, BrokerConfig};
use atms_core::mqtt::session::{ClientSession, SessionEvent};
use atms_core::mqtt::{BrokerState, ClientOptions, MqttClient, Outbound, Packet, QoS, RetryPolicy};
use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PUB: u64 = 1;
const SUB: u64 = 2;

#[derive(Debug)]
enum Hop {
    ToBroker(u64, Packet),
    ToClient(u64, Packet),
}

struct LossyRun {
    acked: usize,
    failed: usize,
    received: HashMap<Bytes, usize>,
}

fn lossy_run(loss: f64, messages: usize, policy: RetryPolicy, seed: u64) -> LossyRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut now = Instant::now();
    let mut broker = BrokerState::new(policy);
    let mut sessions: HashMap<u64, ClientSession> = [
        (PUB, ClientSession::new("pub", policy)),
        (SUB, ClientSession::new("sub", policy)),
    ]
    .into();

    // Handshake over a perfect link.
    for (conn, s) in &sessions {
        let out = broker.handle(*conn, s.connect_packet(0), now);
        assert!(matches!(
            out[..],
            [Outbound::Send(_, Packet::ConnAck { .. })]
        ));
    }
    let (subscribe, _) = sessions
        .get_mut(&SUB)
        .unwrap()
        .subscribe(vec![("pts/+/train/#".into(), QoS::AtLeastOnce)]);
    broker.handle(SUB, subscribe, now);

    let topic = "pts/lk/train/intercity/main/t1/telemetry/gps";
    let mut wire: VecDeque<Hop> = VecDeque::new();
    let mut run = LossyRun {
        acked: 0,
        failed: 0,
        received: HashMap::new(),
    };
    let mut sent = 0;
    let mut idle_rounds = 0;
    while idle_rounds < 200 {
        if sent < messages {
            let payload = Bytes::from(format!("m{sent}"));
            let (p, _) = sessions
                .get_mut(&PUB)
                .unwrap()
                .publish(topic, payload, QoS::AtLeastOnce, false, now)
                .unwrap();
            wire.push_back(Hop::ToBroker(PUB, p));
            sent += 1;
        }
        let batch: Vec<Hop> = wire.drain(..).collect();
        for hop in batch {
            if rng.random_bool(loss) {
                continue;
            }
            match hop {
                Hop::ToBroker(conn, p) => {
                    for o in broker.handle(conn, p, now) {
                        if let Outbound::Send(c, p) = o {
                            wire.push_back(Hop::ToClient(c, p));
                        }
                    }
                }
                Hop::ToClient(conn, p) => {
                    let mut reply = Vec::new();
                    match sessions.get_mut(&conn).unwrap().handle(p, &mut reply) {
                        Some(SessionEvent::Acked(_)) => run.acked += 1,
                        Some(SessionEvent::Message(m)) => {
                            *run.received.entry(m.payload).or_default() += 1
                        }
                        _ => {}
                    }
                    wire.extend(reply.into_iter().map(|r| Hop::ToBroker(conn, r)));
                }
            }
        }
        now += Duration::from_millis(100);
        let t = sessions.get_mut(&PUB).unwrap().poll_timeouts(now);
        run.failed += t.failed.len();
        wire.extend(t.retransmit.into_iter().map(|p| Hop::ToBroker(PUB, p)));
        for o in broker.tick(now) {
            if let Outbound::Send(c, p) = o {
                wire.push_back(Hop::ToClient(c, p));
            }
        }
        let quiet = sent == messages && wire.is_empty() && sessions[&PUB].in_flight() == 0;
        idle_rounds = if quiet { idle_rounds + 1 } else { 0 };
    }
    run
}

#[test]
fn at_least_once_under_thirty_percent_loss() {
    // The retry budget is sized so that exhausting it is vanishingly
    // unlikely: 0.51^31 per hop.
    let policy = RetryPolicy {
        ack_timeout: Duration::from_millis(500),
        max_retransmits: 30,
    };
    for seed in 0..5 {
        let run = lossy_run(0.3, 300, policy, seed);
        assert_eq!(run.failed, 0);
        assert_eq!(run.acked, 300);
        for i in 0..300 {
            let n = run
                .received
                .get(format!("m{i}").as_bytes())
                .copied()
                .unwrap_or(0);
            assert!(n >= 1, "seed {seed}: message {i} lost");
        }
        let duplicates: usize = run.received.values().map(|n| n - 1).sum();
        assert!(duplicates > 0, "loss never forced a redelivery");
    }
}

#[test]
fn lossless_link_delivers_exactly_once() {
    let run = lossy_run(0.0, 100, RetryPolicy::default(), 1);
    assert_eq!(run.acked, 100);
    assert_eq!(run.received.len(), 100);
    assert!(run.received.values().all(|&n| n == 1));
}

#[test]
fn exhausted_retries_are_reported() {
    let policy = RetryPolicy {
        ack_timeout: Duration::from_millis(200),
        max_retransmits: 1,
    };
    let run = lossy_run(0.6, 200, policy, 3);
    assert!(run.failed > 0);
    // Every message is acknowledged or reported failed, never silent.
    assert_eq!(run.acked + run.failed, 200);
}

async fn client(
    addr: std::net::SocketAddr,
    id: &str,
) -> (
    MqttClient,
    tokio::sync::mpsc::UnboundedReceiver<atms_core::mqtt::Message>,
) {
    MqttClient::connect(ClientOptions::new(addr.to_string(), id))
        .await
        .unwrap()
}

async fn recv(
    rx: &mut tokio::sync::mpsc::UnboundedReceiver<atms_core::mqtt::Message>,
) -> atms_core::mqtt::Message {
    tokio::time::timeout(Duration::from_secs(2), rx.recv())
        .await
        .expect("message within 2 s")
        .expect("channel open")
}

#[tokio::test]
async fn tcp_publish_subscribe() {
    let broker = server::start(BrokerConfig::ephemeral()).await.unwrap();
    let addr = broker.local_addr();
    let (sub, mut rx) = client(addr, "sub").await;
    assert_eq!(
        sub.subscribe("pts/+/train/#", QoS::AtLeastOnce)
            .await
            .unwrap(),
        QoS::AtLeastOnce
    );
    let (publisher, _) = client(addr, "pub").await;

    let gps = "pts/lk/train/intercity/main/t1/telemetry/gps";
    let receipt = publisher
        .publish(gps, "one", QoS::AtLeastOnce)
        .await
        .unwrap();
    assert!(receipt.packet_id.is_some());
    publisher
        .publish(gps, "two", QoS::AtMostOnce)
        .await
        .unwrap();
    publisher
        .publish("pts/lk/bus/x/y/b1/telemetry/gps", "bus", QoS::AtLeastOnce)
        .await
        .unwrap();
    publisher
        .publish(gps, "three", QoS::AtLeastOnce)
        .await
        .unwrap();

    let m = recv(&mut rx).await;
    assert_eq!(
        (m.topic.as_str(), &m.payload[..], m.qos),
        (gps, &b"one"[..], QoS::AtLeastOnce)
    );
    let m = recv(&mut rx).await;
    assert_eq!((&m.payload[..], m.qos), (&b"two"[..], QoS::AtMostOnce));
    // The bus message does not match; "three" is next.
    assert_eq!(&recv(&mut rx).await.payload[..], b"three");
    broker.shutdown().await;
}

#[tokio::test]
async fn overlapping_subscriptions_deliver_once_at_max_qos() {
    let broker = server::start(BrokerConfig::ephemeral()).await.unwrap();
    let addr = broker.local_addr();
    let (sub, mut rx) = client(addr, "sub").await;
    sub.subscribe("pts/#", QoS::AtMostOnce).await.unwrap();
    sub.subscribe("pts/lk/train/+/+/t1/alarms", QoS::AtLeastOnce)
        .await
        .unwrap();
    let (publisher, _) = client(addr, "pub").await;
    let topic = "pts/lk/train/intercity/main/t1/alarms";
    publisher
        .publish(topic, "a", QoS::AtLeastOnce)
        .await
        .unwrap();
    publisher
        .publish(topic, "b", QoS::AtMostOnce)
        .await
        .unwrap();
    let a = recv(&mut rx).await;
    assert_eq!((&a.payload[..], a.qos), (&b"a"[..], QoS::AtLeastOnce));
    let b = recv(&mut rx).await;
    assert_eq!((&b.payload[..], b.qos), (&b"b"[..], QoS::AtMostOnce));
    assert!(tokio::time::timeout(Duration::from_millis(200), rx.recv())
        .await
        .is_err());
    broker.shutdown().await;
}

#[tokio::test]
async fn only_status_is_retained() {
    let broker = server::start(BrokerConfig::ephemeral()).await.unwrap();
    let addr = broker.local_addr();
    let (publisher, _) = client(addr, "pub").await;
    let status = "pts/lk/train/intercity/main/t1/status";
    let gps = "pts/lk/train/intercity/main/t1/telemetry/gps";
    publisher
        .publish_retained(status, "running", QoS::AtLeastOnce)
        .await
        .unwrap();
    publisher
        .publish_retained(gps, "fix", QoS::AtLeastOnce)
        .await
        .unwrap();

    let (late, mut rx) = client(addr, "late").await;
    late.subscribe("pts/lk/#", QoS::AtLeastOnce).await.unwrap();
    let m = recv(&mut rx).await;
    assert_eq!(
        (m.topic.as_str(), &m.payload[..], m.retain),
        (status, &b"running"[..], true)
    );
    assert!(tokio::time::timeout(Duration::from_millis(200), rx.recv())
        .await
        .is_err());
    broker.shutdown().await;
}

#[tokio::test]
async fn invalid_filter_is_refused() {
    let broker = server::start(BrokerConfig::ephemeral()).await.unwrap();
    let (c, _) = client(broker.local_addr(), "c").await;
    assert!(c.subscribe("pts/#/x", QoS::AtMostOnce).await.is_err());
    broker.shutdown().await;
}

#[tokio::test]
async fn unreachable_broker_fails_to_connect() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    assert!(
        MqttClient::connect(ClientOptions::new(addr.to_string(), "x"))
            .await
            .is_err()
    );
}

#[tokio::test]
async fn raw_connect_and_reject_non_connect_first() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let broker = server::start(BrokerConfig::ephemeral()).await.unwrap();
    let mut s = tokio::net::TcpStream::connect(broker.local_addr())
        .await
        .unwrap();
    s.write_all(&atms_core::mqtt::encode(&Packet::PingReq).unwrap())
        .await
        .unwrap();
    let mut buf = [0u8; 8];
    let n = tokio::time::timeout(Duration::from_secs(2), s.read(&mut buf))
        .await
        .unwrap()
        .unwrap();
    assert_eq!(
        n, 0,
        "broker must close a connection that does not start with CONNECT"
    );

    let mut s = tokio::net::TcpStream::connect(broker.local_addr())
        .await
        .unwrap();
    let connect = Packet::Connect {
        client_id: String::new(),
        keep_alive_s: 10,
        clean_session: true,
    };
    s.write_all(&atms_core::mqtt::encode(&connect).unwrap())
        .await
        .unwrap();
    let n = s.read(&mut buf).await.unwrap();
    assert_eq!(
        atms_core::mqtt::decode(&buf[..n]).unwrap(),
        atms_core::mqtt::Decoded::Packet(
            Packet::ConnAck {
                session_present: false,
                return_code: ConnectReturnCode::Accepted
            },
            4
        )
    );
    broker.shutdown().await;
}
