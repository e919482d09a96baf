//! Destination alarms: a passenger arms a destination and radius for a
//! vehicle, and the alarm fires once, the first time a fix from that vehicle
//! lies within the radius.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{distance_to_destination, EarthModel, GeoPoint, GpsFix};
use crate::mqtt::{ClientError, MqttClient, QoS};
use crate::topic::{Channel, TopicAddress};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlarmError {
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("threshold must be a positive distance, got {0}")]
    Threshold(f64),
    #[error("alarm watches {expected}, fix is from {actual}")]
    VehicleMismatch { expected: String, actual: String },
    #[error("unknown alarm {0}")]
    UnknownAlarm(String),
    #[error("alarm {0} is no longer armed")]
    NotArmed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlarmState {
    Armed,
    Fired,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DestinationAlarm {
    pub alarm_id: String,
    pub user_id: String,
    pub vehicle_id: String,
    pub destination: GeoPoint,
    pub threshold_m: f64,
    pub state: AlarmState,
    pub fired_at_ms: Option<u64>,
}

/// Alarms channel payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmNotification {
    pub alarm_id: String,
    pub user_id: String,
    pub vehicle: String,
    pub distance_m: f64,
    pub ts_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Evaluation {
    Unchanged,
    Fire(AlarmNotification),
}

impl DestinationAlarm {
    /// Fires when the fix is within `threshold_m` (inclusive) of the
    /// destination. Only an armed alarm can fire; afterwards it stays latched.
    pub fn evaluate_fix(
        &mut self,
        fix: &GpsFix,
        earth: EarthModel,
    ) -> Result<Evaluation, AlarmError> {
        if fix.vehicle_id != self.vehicle_id {
            return Err(AlarmError::VehicleMismatch {
                expected: self.vehicle_id.clone(),
                actual: fix.vehicle_id.clone(),
            });
        }
        if self.state != AlarmState::Armed {
            return Ok(Evaluation::Unchanged);
        }
        let distance_m = distance_to_destination(fix, self.destination, earth);
        if distance_m > self.threshold_m {
            return Ok(Evaluation::Unchanged);
        }
        self.state = AlarmState::Fired;
        self.fired_at_ms = Some(fix.timestamp_ms);
        Ok(Evaluation::Fire(AlarmNotification {
            alarm_id: self.alarm_id.clone(),
            user_id: self.user_id.clone(),
            vehicle: self.vehicle_id.clone(),
            distance_m,
            ts_ms: fix.timestamp_ms,
        }))
    }
}

/// Answers whether a user may arm alarms.
pub trait UserDirectory {
    fn is_registered(&self, user_id: &str) -> bool;
}

impl<F: Fn(&str) -> bool> UserDirectory for F {
    fn is_registered(&self, user_id: &str) -> bool {
        self(user_id)
    }
}

/// All alarms, indexed by vehicle, with the per-vehicle stale-fix filter.
#[derive(Debug, Default)]
pub struct AlarmRegistry {
    earth: EarthModel,
    alarms: HashMap<String, DestinationAlarm>,
    by_vehicle: HashMap<String, Vec<String>>,
    last_seq: HashMap<String, u64>,
    next_id: u64,
}

impl AlarmRegistry {
    pub fn new(earth: EarthModel) -> Self {
        AlarmRegistry {
            earth,
            ..Default::default()
        }
    }

    /// Arms an alarm. Re-arming an identical still-armed alarm returns it
    /// unchanged.
    pub fn arm(
        &mut self,
        users: &dyn UserDirectory,
        user_id: &str,
        vehicle_id: &str,
        destination: GeoPoint,
        threshold_m: f64,
    ) -> Result<DestinationAlarm, AlarmError> {
        if !threshold_m.is_finite() || threshold_m <= 0.0 {
            return Err(AlarmError::Threshold(threshold_m));
        }
        if !users.is_registered(user_id) {
            return Err(AlarmError::UnknownUser(user_id.to_string()));
        }
        let existing = self
            .by_vehicle
            .get(vehicle_id)
            .into_iter()
            .flatten()
            .find_map(|id| {
                let a = &self.alarms[id];
                (a.state == AlarmState::Armed
                    && a.user_id == user_id
                    && a.destination == destination
                    && a.threshold_m == threshold_m)
                    .then(|| a.clone())
            });
        if let Some(a) = existing {
            return Ok(a);
        }
        self.next_id += 1;
        let alarm = DestinationAlarm {
            alarm_id: format!("alm-{:06}", self.next_id),
            user_id: user_id.to_string(),
            vehicle_id: vehicle_id.to_string(),
            destination,
            threshold_m,
            state: AlarmState::Armed,
            fired_at_ms: None,
        };
        self.by_vehicle
            .entry(vehicle_id.to_string())
            .or_default()
            .push(alarm.alarm_id.clone());
        self.alarms.insert(alarm.alarm_id.clone(), alarm.clone());
        Ok(alarm)
    }

    pub fn cancel(&mut self, alarm_id: &str) -> Result<DestinationAlarm, AlarmError> {
        let alarm = self
            .alarms
            .get_mut(alarm_id)
            .ok_or_else(|| AlarmError::UnknownAlarm(alarm_id.to_string()))?;
        if alarm.state != AlarmState::Armed {
            return Err(AlarmError::NotArmed(alarm_id.to_string()));
        }
        alarm.state = AlarmState::Cancelled;
        Ok(alarm.clone())
    }

    pub fn get(&self, alarm_id: &str) -> Option<&DestinationAlarm> {
        self.alarms.get(alarm_id)
    }

    pub fn for_user(&self, user_id: &str) -> Vec<DestinationAlarm> {
        let mut v: Vec<_> = self
            .alarms
            .values()
            .filter(|a| a.user_id == user_id)
            .cloned()
            .collect();
        v.sort_by(|a, b| a.alarm_id.cmp(&b.alarm_id));
        v
    }

    /// Evaluates every armed alarm on the fix's vehicle. Fixes whose seq is
    /// not newer than the last evaluated one for that vehicle are ignored.
    pub fn evaluate(&mut self, fix: &GpsFix) -> Vec<AlarmNotification> {
        if let Some(&last) = self.last_seq.get(&fix.vehicle_id) {
            if fix.seq <= last {
                return Vec::new();
            }
        }
        self.last_seq.insert(fix.vehicle_id.clone(), fix.seq);
        let Some(ids) = self.by_vehicle.get(&fix.vehicle_id) else {
            return Vec::new();
        };
        let mut fired = Vec::new();
        for id in ids {
            let alarm = self.alarms.get_mut(id).expect("indexed alarm exists");
            if let Ok(Evaluation::Fire(n)) = alarm.evaluate_fix(fix, self.earth) {
                fired.push(n);
            }
        }
        fired
    }
}

/// Publishes a notification on the vehicle's alarms channel at QoS 1.
pub async fn notify(
    client: &MqttClient,
    vehicle: &TopicAddress,
    notification: &AlarmNotification,
) -> Result<(), ClientError> {
    let topic = vehicle.with_channel(Channel::Alarms).render();
    let payload = serde_json::to_vec(notification).expect("serializable");
    client.publish(topic, payload, QoS::AtLeastOnce).await?;
    Ok(())
}
