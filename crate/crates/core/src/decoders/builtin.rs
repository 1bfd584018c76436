//! Vendor decoders for the device families in the fleet.

use std::sync::Arc;

use serde_json::{Map, Value};

use super::{
    flatten, flatten_into, sim_t0_of, Cooked, DecodeError, Decoder, NormalizedMessage, Original,
    RawSensorMessage, Reading,
};
use crate::clock::parse_time_ms;
use crate::wire::TopicFilter;

const VENDOR_PRIORITY: i32 = 10;
const PASSTHROUGH_PRIORITY: i32 = 100;

pub fn builtin_decoders() -> Vec<Arc<dyn Decoder>> {
    vec![
        Arc::new(PassthroughDecoder),
        Arc::new(SmartPlugDecoder::new()),
        Arc::new(TtnDecoder::new()),
        Arc::new(ZigbeeDecoder::new()),
        Arc::new(CoffeeDecoder::new()),
        Arc::new(DeepDishDecoder::new()),
    ]
}

fn filter(raw: &str) -> TopicFilter {
    TopicFilter::new(raw).expect("builtin filter is valid")
}

fn object(msg: &RawSensorMessage) -> Result<Map<String, Value>, DecodeError> {
    match msg.json()? {
        Value::Object(map) => Ok(map),
        _ => Err(DecodeError::new("payload is not a JSON object")),
    }
}

fn epoch_field(value: Option<&Value>) -> Option<u64> {
    match value? {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => parse_time_ms(s),
        _ => None,
    }
}

fn topic_device(msg: &RawSensorMessage, level: usize) -> Result<String, DecodeError> {
    msg.topic
        .level(level)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .ok_or_else(|| DecodeError::new("device id missing from topic"))
}

fn normalized(
    msg: &RawSensorMessage,
    device_id: String,
    family: &str,
    ts: Option<u64>,
    cooked: Cooked,
    sim_t0: Option<u64>,
) -> NormalizedMessage {
    NormalizedMessage {
        device_id,
        ts: ts.unwrap_or(msg.received_at),
        family: family.to_owned(),
        cooked,
        received_at: msg.received_at,
        sim_t0,
        original: Original(msg.payload.clone()),
    }
}

/// Re-ingests messages that are already normalized, e.g. from another instance.
pub struct PassthroughDecoder;

impl Decoder for PassthroughDecoder {
    fn name(&self) -> &str {
        "normalized"
    }

    fn priority(&self) -> i32 {
        PASSTHROUGH_PRIORITY
    }

    fn matches(&self, msg: &RawSensorMessage) -> bool {
        msg.payload.trim_ascii_start().starts_with(br#"{"device_id":"#)
    }

    fn decode(&self, msg: &RawSensorMessage) -> Result<NormalizedMessage, DecodeError> {
        serde_json::from_slice(&msg.payload)
            .map_err(|e| DecodeError::new(format!("not a normalized message: {e}")))
    }
}

/// Tasmota-style smart plug telemetry; the device id only appears in the topic.
pub struct SmartPlugDecoder {
    filter: TopicFilter,
}

impl SmartPlugDecoder {
    pub fn new() -> Self {
        Self {
            filter: filter("tele/+/SENSOR"),
        }
    }
}

impl Default for SmartPlugDecoder {
    fn default() -> Self {
        Self::new()
    }
}

fn energy_key(vendor: &str) -> String {
    match vendor {
        "Power" => "power_w".into(),
        "ApparentPower" => "apparent_power_va".into(),
        "ReactivePower" => "reactive_power_var".into(),
        "Factor" => "power_factor".into(),
        "Voltage" => "voltage_v".into(),
        "Current" => "current_a".into(),
        "Total" => "energy_total_kwh".into(),
        "Today" => "energy_today_kwh".into(),
        "Yesterday" => "energy_yesterday_kwh".into(),
        other => format!("energy.{other}"),
    }
}

impl Decoder for SmartPlugDecoder {
    fn name(&self) -> &str {
        "smartplug"
    }

    fn priority(&self) -> i32 {
        VENDOR_PRIORITY
    }

    fn matches(&self, msg: &RawSensorMessage) -> bool {
        self.filter.matches(&msg.topic)
    }

    fn decode(&self, msg: &RawSensorMessage) -> Result<NormalizedMessage, DecodeError> {
        let device_id = topic_device(msg, 1)?;
        let payload = object(msg)?;
        let energy = payload
            .get("ENERGY")
            .and_then(Value::as_object)
            .ok_or_else(|| DecodeError::new("missing ENERGY object"))?;
        if !energy.get("Power").is_some_and(Value::is_number) {
            return Err(DecodeError::new("missing ENERGY.Power"));
        }
        let mut cooked = Cooked::new();
        for (k, v) in energy {
            flatten_into(&energy_key(k), v, &mut cooked);
        }
        let ts = payload.get("Time").and_then(Value::as_str).and_then(parse_time_ms);
        Ok(normalized(msg, device_id, "smartplug", ts, cooked, sim_t0_of(&Value::Object(payload))))
    }
}

/// The Things Network v3 uplinks with an application-decoded payload.
pub struct TtnDecoder {
    filter: TopicFilter,
}

impl TtnDecoder {
    pub fn new() -> Self {
        Self {
            filter: filter("v3/+/devices/+/up"),
        }
    }
}

impl Default for TtnDecoder {
    fn default() -> Self {
        Self::new()
    }
}

fn ttn_family(decoded: &Cooked) -> &'static str {
    if decoded.contains_key("co2") {
        "co2"
    } else if decoded.contains_key("occupancy") {
        "occupancy"
    } else if decoded.contains_key("temperature") {
        "temperature"
    } else {
        "lora"
    }
}

impl Decoder for TtnDecoder {
    fn name(&self) -> &str {
        "ttn"
    }

    fn priority(&self) -> i32 {
        VENDOR_PRIORITY
    }

    fn matches(&self, msg: &RawSensorMessage) -> bool {
        self.filter.matches(&msg.topic)
    }

    fn decode(&self, msg: &RawSensorMessage) -> Result<NormalizedMessage, DecodeError> {
        let payload = Value::Object(object(msg)?);
        let device_id = payload
            .pointer("/end_device_ids/device_id")
            .and_then(Value::as_str)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| DecodeError::new("missing end_device_ids.device_id"))?
            .to_owned();
        let cooked = payload
            .pointer("/uplink_message/decoded_payload")
            .map(flatten)
            .unwrap_or_default();
        let ts = epoch_field(payload.pointer("/uplink_message/received_at"))
            .or_else(|| epoch_field(payload.get("received_at")));
        let family = ttn_family(&cooked);
        Ok(normalized(msg, device_id, family, ts, cooked, sim_t0_of(&payload)))
    }
}

/// deCONZ sensor events as republished by the zigbee translator.
pub struct ZigbeeDecoder {
    filter: TopicFilter,
}

impl ZigbeeDecoder {
    pub fn new() -> Self {
        Self {
            filter: filter("zigbee/+/state"),
        }
    }
}

impl Default for ZigbeeDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Decoder for ZigbeeDecoder {
    fn name(&self) -> &str {
        "zigbee"
    }

    fn priority(&self) -> i32 {
        VENDOR_PRIORITY
    }

    fn matches(&self, msg: &RawSensorMessage) -> bool {
        self.filter.matches(&msg.topic)
    }

    fn decode(&self, msg: &RawSensorMessage) -> Result<NormalizedMessage, DecodeError> {
        let payload = object(msg)?;
        let device_id = match payload.get("id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => topic_device(msg, 1)?,
        };
        let state = payload
            .get("state")
            .and_then(Value::as_object)
            .ok_or_else(|| DecodeError::new("missing state object"))?;
        let ts = state.get("lastupdated").and_then(Value::as_str).and_then(parse_time_ms);
        let mut cooked = Cooked::new();
        for (k, v) in state.iter().filter(|(k, _)| k.as_str() != "lastupdated") {
            flatten_into(k, v, &mut cooked);
        }
        if let Some(config) = payload.get("config") {
            flatten_into("config", config, &mut cooked);
        }
        let family = if cooked.contains_key("presence") {
            "motion"
        } else if cooked.contains_key("open") {
            "door"
        } else {
            "zigbee"
        };
        Ok(normalized(msg, device_id, family, ts, cooked, sim_t0_of(&Value::Object(payload))))
    }
}

/// The coffee pot node: one weight and two power readings per sample.
pub struct CoffeeDecoder {
    filter: TopicFilter,
}

impl CoffeeDecoder {
    pub fn new() -> Self {
        Self {
            filter: filter("coffee/+/reading"),
        }
    }
}

impl Default for CoffeeDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Decoder for CoffeeDecoder {
    fn name(&self) -> &str {
        "coffee"
    }

    fn priority(&self) -> i32 {
        VENDOR_PRIORITY
    }

    fn matches(&self, msg: &RawSensorMessage) -> bool {
        self.filter.matches(&msg.topic)
    }

    fn decode(&self, msg: &RawSensorMessage) -> Result<NormalizedMessage, DecodeError> {
        let device_id = topic_device(msg, 1)?;
        let payload = object(msg)?;
        let mut cooked = Cooked::new();
        for key in ["weight_kg", "grinder_w", "brewer_w"] {
            match payload.get(key) {
                Some(Value::Number(n)) => {
                    cooked.insert(key.to_owned(), Reading::Number(n.as_f64().unwrap_or(0.0)));
                }
                Some(Value::Null) | None => {}
                Some(_) => return Err(DecodeError::new(format!("{key} is not a number"))),
            }
        }
        if cooked.is_empty() {
            return Err(DecodeError::new("no coffee readings"));
        }
        let ts = epoch_field(payload.get("ts"));
        Ok(normalized(msg, device_id, "coffee", ts, cooked, sim_t0_of(&Value::Object(payload))))
    }
}

/// People counts reported by the camera-based counter.
pub struct DeepDishDecoder {
    filter: TopicFilter,
}

impl DeepDishDecoder {
    pub fn new() -> Self {
        Self {
            filter: filter("deepdish/+/count"),
        }
    }
}

impl Default for DeepDishDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Decoder for DeepDishDecoder {
    fn name(&self) -> &str {
        "deepdish"
    }

    fn priority(&self) -> i32 {
        VENDOR_PRIORITY
    }

    fn matches(&self, msg: &RawSensorMessage) -> bool {
        self.filter.matches(&msg.topic)
    }

    fn decode(&self, msg: &RawSensorMessage) -> Result<NormalizedMessage, DecodeError> {
        let device_id = topic_device(msg, 1)?;
        let payload = object(msg)?;
        let count = payload
            .get("count")
            .and_then(Value::as_f64)
            .ok_or_else(|| DecodeError::new("missing count"))?;
        let mut cooked = Cooked::new();
        cooked.insert("people_count".into(), Reading::Number(count));
        for (k, v) in payload
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "count" | "ts" | "sim_t0"))
        {
            flatten_into(k, v, &mut cooked);
        }
        let ts = epoch_field(payload.get("ts"));
        Ok(normalized(msg, device_id, "deepdish", ts, cooked, sim_t0_of(&Value::Object(payload))))
    }
}
