//! Real-time streaming stack for smart-building sensors.
//!
//! Simulated devices publish over an MQTT 3.1.1 subset to bridged brokers; a
//! real-time server decodes, stores, analyzes and republishes the streams through
//! a shared in-process event bus; a harness measures latency at four tap points.

pub mod bench;
pub mod broker;
pub mod clock;
pub mod decoders;
pub mod metadata;
pub mod mqtt;
pub mod queue;
pub mod rts;
pub mod simfleet;
pub mod stack;
pub mod wire;
