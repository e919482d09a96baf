//! Single ordered pipeline from the bus into snapshots, alarms, taps and
//! the WebSocket fan-out.

use atms_core::alarm::notify;
use atms_core::fare::{TapEvent, TapOutcome};
use atms_core::mqtt::Message;
use atms_core::occupancy::OccupancyMessage;
use atms_core::sim::decode_fix;
use atms_core::{now_ms, topic, Channel};
use tokio::sync::mpsc;
use tracing::{debug, warn};

use crate::state::{BusEvent, Metrics, Shared, TrainSnapshot};

pub async fn consume(state: Shared, mut messages: mpsc::UnboundedReceiver<Message>) {
    while let Some(m) = messages.recv().await {
        handle(&state, m);
    }
    debug!("bus stream ended");
}

pub fn handle(state: &Shared, m: Message) {
    Metrics::inc(&state.metrics.bus_messages);
    let received_ms = now_ms();
    let payload = serde_json::from_slice(&m.payload).unwrap_or_else(|_| {
        serde_json::Value::String(String::from_utf8_lossy(&m.payload).into_owned())
    });
    // No receivers is fine.
    let _ = state.events.send(BusEvent {
        topic: m.topic.clone(),
        payload,
        ts_ms: received_ms,
    });

    let Ok(address) = topic::parse(&m.topic) else {
        debug!(topic = m.topic, "ignoring topic outside the scheme");
        return;
    };
    let malformed = |what: &str| {
        Metrics::inc(&state.metrics.malformed_payloads);
        warn!(topic = m.topic, "malformed {what} payload dropped");
    };
    match address.channel {
        Channel::TelemetryGps => {
            let fix = match decode_fix(&m.payload) {
                Ok(fix) if fix.vehicle_id == address.vehicle_id.as_str() => fix,
                _ => return malformed("fix"),
            };
            {
                let mut trains = state.trains.write().unwrap();
                if trains
                    .get(&fix.vehicle_id)
                    .is_some_and(|s| s.fix.seq >= fix.seq)
                {
                    Metrics::inc(&state.metrics.stale_fixes_ignored);
                    return;
                }
                trains.insert(
                    fix.vehicle_id.clone(),
                    TrainSnapshot {
                        address: address.clone(),
                        fix: fix.clone(),
                        received_ms,
                    },
                );
            }
            Metrics::inc(&state.metrics.fixes_applied);
            let fired = state.alarms.lock().unwrap().evaluate(&fix);
            for n in fired {
                Metrics::inc(&state.metrics.alarms_fired);
                let state = state.clone();
                let address = address.clone();
                tokio::spawn(async move {
                    if let Err(e) = notify(&state.bus, &address, &n).await {
                        Metrics::inc(&state.metrics.notify_failures);
                        warn!(alarm = n.alarm_id, error = %e, "alarm notification failed");
                    }
                });
            }
        }
        Channel::Occupancy => match serde_json::from_slice::<OccupancyMessage>(&m.payload) {
            Ok(msg) => {
                state
                    .occupancy
                    .write()
                    .unwrap()
                    .entry(address.vehicle_id.to_string())
                    .or_default()
                    .insert(msg.compartment.clone(), msg);
            }
            Err(_) => malformed("occupancy"),
        },
        Channel::TicketsTaps => match serde_json::from_slice::<TapEvent>(&m.payload) {
            Ok(tap) => {
                Metrics::inc(&state.metrics.taps_processed);
                match state.fare.tap(&tap) {
                    Ok(TapOutcome::Rejected { reason }) => {
                        debug!(account = tap.account_id, ?reason, "bus tap rejected")
                    }
                    Ok(_) => {}
                    Err(e) => warn!(error = %e, "ledger write failed"),
                }
            }
            Err(_) => malformed("tap"),
        },
        Channel::Alarms | Channel::Status => {}
    }
}
