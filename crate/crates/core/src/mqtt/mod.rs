//! MQTT 3.1.1 subset: codec, broker and client.

pub mod broker;
pub mod client;
pub mod codec;
mod inflight;
pub mod server;
pub mod session;

pub use broker::{BrokerState, Delivery, Outbound};
pub use client::{Backoff, ClientError, ClientOptions, Message, MqttClient, Receipt};
pub use codec::{decode, encode, Decoded, Packet, Publish, QoS};
pub use inflight::RetryPolicy;
pub use server::{BrokerConfig, BrokerHandle};
