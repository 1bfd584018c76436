//! Decoder set and decoder manager.
//!
//! Every raw message ends up either as a [`NormalizedMessage`] or as a
//! [`DeadLetter`]; the registry picks the decoder, the decoder extracts readings.

mod builtin;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use base64::Engine;
use bytes::Bytes;
use parking_lot::RwLock;
use serde::de::{self, Deserializer};
use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::wire::{TopicFilter, TopicName};

pub use builtin::{
    builtin_decoders, CoffeeDecoder, DeepDishDecoder, PassthroughDecoder, SmartPlugDecoder,
    TtnDecoder, ZigbeeDecoder,
};

/// MQTT topic that carries dead letters once routed off the bus.
pub const DEAD_LETTER_TOPIC: &str = "sensert/deadletter";

/// Readings later than first-hop receipt by more than this are clamped.
pub const CLOCK_SKEW_ALLOWANCE_MS: u64 = 500;

/// A message as it arrived over its first hop.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSensorMessage {
    pub topic: TopicName,
    pub payload: Bytes,
    pub received_at: u64,
}

impl RawSensorMessage {
    pub fn new(topic: TopicName, payload: impl Into<Bytes>, received_at: u64) -> Self {
        Self {
            topic,
            payload: payload.into(),
            received_at,
        }
    }

    pub fn json(&self) -> Result<Value, DecodeError> {
        serde_json::from_slice(&self.payload)
            .map_err(|e| DecodeError::new(format!("payload is not JSON: {e}")))
    }
}

/// One cooked reading value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reading {
    Flag(bool),
    Number(f64),
    Text(String),
}

impl Reading {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Reading::Number(n) => Some(*n),
            Reading::Flag(b) => Some(if *b { 1.0 } else { 0.0 }),
            Reading::Text(_) => None,
        }
    }
}

impl From<f64> for Reading {
    fn from(v: f64) -> Self {
        Reading::Number(v)
    }
}

impl From<bool> for Reading {
    fn from(v: bool) -> Self {
        Reading::Flag(v)
    }
}

impl From<&str> for Reading {
    fn from(v: &str) -> Self {
        Reading::Text(v.to_owned())
    }
}

pub type Cooked = BTreeMap<String, Reading>;

/// Raw payload bytes kept verbatim. Serialized as a string when valid UTF-8,
/// otherwise as `{"base64": "..."}`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Original(pub Bytes);

impl Serialize for Original {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(&self.0) {
            Ok(text) => s.serialize_str(text),
            Err(_) => {
                let mut map = s.serialize_map(Some(1))?;
                map.serialize_entry(
                    "base64",
                    &base64::engine::general_purpose::STANDARD.encode(&self.0),
                )?;
                map.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for Original {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Encoded { base64: String },
        }
        match Repr::deserialize(d)? {
            Repr::Text(t) => Ok(Original(Bytes::from(t))),
            Repr::Encoded { base64 } => base64::engine::general_purpose::STANDARD
                .decode(base64)
                .map(|b| Original(Bytes::from(b)))
                .map_err(de::Error::custom),
        }
    }
}

/// Homogenized record published on the bus and stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMessage {
    pub device_id: String,
    pub ts: u64,
    pub family: String,
    pub cooked: Cooked,
    pub received_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_t0: Option<u64>,
    pub original: Original,
}

impl NormalizedMessage {
    pub fn get(&self, field: &str) -> Option<&Reading> {
        self.cooked.get(field)
    }

    pub fn number(&self, field: &str) -> Option<f64> {
        self.cooked.get(field).and_then(Reading::as_f64)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("normalized message serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError {
    pub reason: String,
}

impl DecodeError {
    pub fn new(reason: impl Into<String>) -> Self {
        Self {
            reason: reason.into(),
        }
    }
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.reason)
    }
}

impl std::error::Error for DecodeError {}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("decoder name already registered: {0}")]
    DuplicateName(String),
}

/// A message no decoder could turn into a reading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadLetter {
    pub topic: String,
    pub received_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<String>,
    pub reason: String,
    pub original: Original,
}

pub trait Decoder: Send + Sync {
    fn name(&self) -> &str;
    fn priority(&self) -> i32;
    fn matches(&self, msg: &RawSensorMessage) -> bool;
    fn decode(&self, msg: &RawSensorMessage) -> Result<NormalizedMessage, DecodeError>;
}

type DecodeFn = dyn Fn(&RawSensorMessage) -> Result<NormalizedMessage, DecodeError> + Send + Sync;

/// Decoder built from a topic filter and a closure.
pub struct FnDecoder {
    name: String,
    priority: i32,
    filter: TopicFilter,
    decode: Box<DecodeFn>,
}

impl FnDecoder {
    pub fn new<F>(name: impl Into<String>, priority: i32, filter: TopicFilter, decode: F) -> Self
    where
        F: Fn(&RawSensorMessage) -> Result<NormalizedMessage, DecodeError> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            priority,
            filter,
            decode: Box::new(decode),
        }
    }
}

impl Decoder for FnDecoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn priority(&self) -> i32 {
        self.priority
    }

    fn matches(&self, msg: &RawSensorMessage) -> bool {
        self.filter.matches(&msg.topic)
    }

    fn decode(&self, msg: &RawSensorMessage) -> Result<NormalizedMessage, DecodeError> {
        (self.decode)(msg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecoderStats {
    pub decoded: u64,
    pub dead_letters: u64,
    pub clamped: u64,
}

#[derive(Default)]
struct Counters {
    decoded: AtomicU64,
    dead_letters: AtomicU64,
    clamped: AtomicU64,
}

/// The decoder manager. Lookups run concurrently; registration is exclusive.
#[derive(Clone, Default)]
pub struct DecoderRegistry {
    decoders: Arc<RwLock<Vec<Arc<dyn Decoder>>>>,
    counters: Arc<Counters>,
}

impl DecoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_builtin() -> Self {
        let registry = Self::new();
        for decoder in builtin_decoders() {
            registry
                .register(decoder)
                .expect("builtin decoder names are distinct");
        }
        registry
    }

    pub fn register(&self, decoder: Arc<dyn Decoder>) -> Result<(), RegistryError> {
        let mut decoders = self.decoders.write();
        if decoders.iter().any(|d| d.name() == decoder.name()) {
            return Err(RegistryError::DuplicateName(decoder.name().to_owned()));
        }
        decoders.push(decoder);
        decoders.sort_by(|a, b| {
            b.priority()
                .cmp(&a.priority())
                .then_with(|| a.name().cmp(b.name()))
        });
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.decoders.read().iter().map(|d| d.name().to_owned()).collect()
    }

    /// Highest priority matching decoder; ties go to the smaller name.
    pub fn select(&self, msg: &RawSensorMessage) -> Option<Arc<dyn Decoder>> {
        self.decoders
            .read()
            .iter()
            .find(|d| d.matches(msg))
            .cloned()
    }

    /// Decodes one message, applying the reading-time rules.
    pub fn process(&self, msg: &RawSensorMessage) -> Result<NormalizedMessage, DeadLetter> {
        let dead = |decoder: Option<String>, reason: String| DeadLetter {
            topic: msg.topic.to_string(),
            received_at: msg.received_at,
            decoder,
            reason,
            original: Original(msg.payload.clone()),
        };
        let outcome = match self.select(msg) {
            None => Err(dead(None, "no decoder".into())),
            Some(decoder) => match decoder.decode(msg) {
                Ok(normalized) => self.check(normalized, msg.received_at).map_err(|reason| {
                    dead(Some(decoder.name().to_owned()), reason)
                }),
                Err(e) => Err(dead(Some(decoder.name().to_owned()), e.reason)),
            },
        };
        match &outcome {
            Ok(_) => self.counters.decoded.fetch_add(1, Ordering::Relaxed),
            Err(_) => self.counters.dead_letters.fetch_add(1, Ordering::Relaxed),
        };
        outcome
    }

    fn check(&self, mut m: NormalizedMessage, received_at: u64) -> Result<NormalizedMessage, String> {
        if m.device_id.is_empty() {
            return Err("empty device id".into());
        }
        if m.cooked.keys().any(String::is_empty) {
            return Err("empty reading name".into());
        }
        if m.ts == 0 {
            m.ts = received_at;
        }
        if m.ts > received_at.saturating_add(CLOCK_SKEW_ALLOWANCE_MS) {
            m.ts = received_at;
            self.counters.clamped.fetch_add(1, Ordering::Relaxed);
        }
        Ok(m)
    }

    pub fn stats(&self) -> DecoderStats {
        DecoderStats {
            decoded: self.counters.decoded.load(Ordering::Relaxed),
            dead_letters: self.counters.dead_letters.load(Ordering::Relaxed),
            clamped: self.counters.clamped.load(Ordering::Relaxed),
        }
    }
}

/// Flattens nested JSON into `.`-joined keys. Nulls are skipped.
pub fn flatten_into(prefix: &str, value: &Value, out: &mut Cooked) {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_owned()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        Value::Null => {}
        Value::Bool(b) => {
            out.insert(prefix.to_owned(), Reading::Flag(*b));
        }
        Value::Number(n) => {
            if let Some(f) = n.as_f64() {
                out.insert(prefix.to_owned(), Reading::Number(f));
            }
        }
        Value::String(s) => {
            out.insert(prefix.to_owned(), Reading::Text(s.clone()));
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                flatten_into(&key(&i.to_string()), item, out);
            }
        }
        Value::Object(map) => {
            for (k, v) in map {
                flatten_into(&key(k), v, out);
            }
        }
    }
}

pub fn flatten(value: &Value) -> Cooked {
    let mut out = Cooked::new();
    flatten_into("", value, &mut out);
    out.remove("");
    out
}

/// Top-level `sim_t0` if present.
pub fn sim_t0_of(payload: &Value) -> Option<u64> {
    payload.get("sim_t0").and_then(Value::as_u64)
}
