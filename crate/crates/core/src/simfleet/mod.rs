//! Sensor fleet simulator: device profiles emitting vendor-shaped payloads on
//! their native transports, with scripted scenarios and ground truth.

mod deconz;
mod run;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::clock::{to_datetime, to_rfc3339};
use crate::decoders::RawSensorMessage;
use crate::rts::{
    COFFEE_GRINDING, NEW_POT, POT_EMPTY, POT_POURED, POT_REMOVED, THRESHOLD_CLEARED, THRESHOLD_CROSSED,
};
use crate::wire::TopicName;

pub use deconz::{DeconzGateway, DeconzSender, TranslatorHandle, TranslatorStats, ZigbeeTranslator};
pub use run::{run_fleet, FleetConfig, FleetReport, SimClock};

/// Observer for a raw message at a gateway hop: topic and payload bytes.
pub type PayloadTap = std::sync::Arc<dyn Fn(&TopicName, &[u8]) + Send + Sync>;

/// Messages held per device while its transport is down.
pub const DEVICE_BUFFER: usize = 100;
pub const DEFAULT_NOISE_KG: f64 = 0.01;
pub const DEEPDISH_DELAY_S: f64 = 0.2;
pub const COFFEE_NODE_ID: &str = "pot-1";
pub const CO2_NODE_ID: &str = "co2-1";

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid profile {device_id}: {reason}")]
    Profile { device_id: String, reason: String },
    #[error("duplicate device id {0}")]
    DuplicateDevice(String),
    #[error("scenario step for unknown device {0}")]
    UnknownScriptDevice(String),
    #[error("scenario offsets must be non-decreasing (step {index})")]
    ScriptOrder { index: usize },
    #[error("fleet file: {0}")]
    Fleet(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    SmartPlug,
    LoraCO2,
    LoraTemp,
    LoraOccupancy,
    ZigbeeMotion,
    ZigbeeDoor,
    DeepDish,
    CoffeeNode,
}

impl Family {
    pub const ALL: [Family; 8] = [
        Family::SmartPlug,
        Family::LoraCO2,
        Family::LoraTemp,
        Family::LoraOccupancy,
        Family::ZigbeeMotion,
        Family::ZigbeeDoor,
        Family::DeepDish,
        Family::CoffeeNode,
    ];

    pub fn default_transport(self) -> Transport {
        match self {
            Family::LoraCO2 | Family::LoraTemp | Family::LoraOccupancy => Transport::TtnMqtt,
            Family::ZigbeeMotion | Family::ZigbeeDoor => Transport::DeconzWs,
            Family::SmartPlug | Family::DeepDish | Family::CoffeeNode => Transport::WifiMqtt,
        }
    }

    /// Sensor category used when grouping latency results.
    pub fn category(self) -> &'static str {
        match self {
            Family::SmartPlug => "smartplug",
            Family::LoraCO2 | Family::LoraTemp | Family::LoraOccupancy => "lora",
            Family::ZigbeeMotion | Family::ZigbeeDoor => "zigbee",
            Family::DeepDish => "deepdish",
            Family::CoffeeNode => "coffee",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Family::SmartPlug => "plug",
            Family::LoraCO2 => "co2",
            Family::LoraTemp => "temp",
            Family::LoraOccupancy => "occ",
            Family::ZigbeeMotion => "motion",
            Family::ZigbeeDoor => "door",
            Family::DeepDish => "cam",
            Family::CoffeeNode => "pot",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transport {
    WifiMqtt,
    TtnMqtt,
    DeconzWs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_id: String,
    pub family: Family,
    pub period_s: f64,
    pub transport: Transport,
    #[serde(default)]
    pub jitter_s: f64,
    #[serde(default)]
    pub extra_delay_s: f64,
    /// Weight noise for coffee nodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_kg: Option<f64>,
}

impl DeviceProfile {
    pub fn new(device_id: impl Into<String>, family: Family) -> Self {
        Self {
            device_id: device_id.into(),
            family,
            period_s: 1.0,
            transport: family.default_transport(),
            jitter_s: 0.0,
            extra_delay_s: if family == Family::DeepDish { DEEPDISH_DELAY_S } else { 0.0 },
            noise_kg: None,
        }
    }

    pub fn period(mut self, seconds: f64) -> Self {
        self.period_s = seconds;
        self
    }

    pub fn jitter(mut self, seconds: f64) -> Self {
        self.jitter_s = seconds;
        self
    }

    pub fn extra_delay(mut self, seconds: f64) -> Self {
        self.extra_delay_s = seconds;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: &str| {
            Err(SimError::Profile {
                device_id: self.device_id.clone(),
                reason: reason.into(),
            })
        };
        if self.device_id.is_empty() || self.device_id.contains(['/', '+', '#', '\0']) {
            return bad("device id must be a single topic level");
        }
        if !(self.period_s > 0.0 && self.period_s.is_finite()) {
            return bad("period_s must be positive");
        }
        if !(self.jitter_s >= 0.0 && self.extra_delay_s >= 0.0) {
            return bad("jitter_s and extra_delay_s must be non-negative");
        }
        if self.jitter_s >= self.period_s / 2.0 && self.jitter_s > 0.0 {
            return bad("jitter_s must be under half the period");
        }
        Ok(())
    }

    /// Topic the device's payload reaches a broker on (after translation for zigbee).
    pub fn topic(&self, ttn_app: &str) -> TopicName {
        let id = &self.device_id;
        let raw = match self.family {
            Family::SmartPlug => format!("tele/{id}/SENSOR"),
            Family::LoraCO2 | Family::LoraTemp | Family::LoraOccupancy => format!("v3/{ttn_app}/devices/{id}/up"),
            Family::ZigbeeMotion | Family::ZigbeeDoor => format!("zigbee/{id}/state"),
            Family::DeepDish => format!("deepdish/{id}/count"),
            Family::CoffeeNode => format!("coffee/{id}/reading"),
        };
        TopicName::new(raw).expect("device ids are validated as single levels")
    }
}

pub fn validate_fleet(profiles: &[DeviceProfile]) -> Result<(), SimError> {
    let mut seen = HashSet::new();
    for p in profiles {
        p.validate()?;
        if !seen.insert(p.device_id.as_str()) {
            return Err(SimError::DuplicateDevice(p.device_id.clone()));
        }
    }
    Ok(())
}

pub fn fleet_from_json(raw: &str) -> Result<Vec<DeviceProfile>, SimError> {
    let profiles: Vec<DeviceProfile> = serde_json::from_str(raw)?;
    validate_fleet(&profiles)?;
    Ok(profiles)
}

/// A mixed fleet of `n` devices cycling through every family except the coffee node.
pub fn standard_fleet(n: usize) -> Vec<DeviceProfile> {
    const MIX: [Family; 7] = [
        Family::SmartPlug,
        Family::LoraCO2,
        Family::ZigbeeMotion,
        Family::DeepDish,
        Family::LoraTemp,
        Family::ZigbeeDoor,
        Family::LoraOccupancy,
    ];
    (0..n)
        .map(|i| {
            let family = MIX[i % MIX.len()];
            DeviceProfile::new(format!("{}-{i:03}", family.short()), family).jitter(0.05)
        })
        .collect()
}

/// Simulation-side ground truth of the coffee pot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoffeePotState {
    pub pot_present: bool,
    pub coffee_kg: f64,
    pub grinder_w: f64,
    pub brewer_w: f64,
}

impl Default for CoffeePotState {
    fn default() -> Self {
        Self {
            pot_present: true,
            coffee_kg: 0.0,
            grinder_w: 0.0,
            brewer_w: 0.0,
        }
    }
}

impl CoffeePotState {
    pub fn true_weight(&self) -> f64 {
        if self.pot_present {
            crate::rts::coffee::POT_KG + self.coffee_kg
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub t_offset_s: f64,
    pub device_id: String,
    /// Model fields to pin from now on; `null` releases a pin.
    pub fields: Map<String, Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    pub steps: Vec<ScriptStep>,
    /// Derived-event types the scenario should produce, in order.
    #[serde(default)]
    pub ground_truth: Vec<String>,
    #[serde(default)]
    pub duration_s: f64,
}

impl ScenarioScript {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn step(mut self, t_offset_s: f64, device_id: &str, fields: Value) -> Self {
        let Value::Object(fields) = fields else {
            panic!("script fields must be a JSON object");
        };
        self.steps.push(ScriptStep {
            t_offset_s,
            device_id: device_id.to_owned(),
            fields,
        });
        self
    }

    pub fn validate(&self, profiles: &[DeviceProfile]) -> Result<(), SimError> {
        for (index, pair) in self.steps.windows(2).enumerate() {
            if pair[1].t_offset_s < pair[0].t_offset_s {
                return Err(SimError::ScriptOrder { index: index + 1 });
            }
        }
        for s in &self.steps {
            if !profiles.iter().any(|p| p.device_id == s.device_id) {
                return Err(SimError::UnknownScriptDevice(s.device_id.clone()));
            }
        }
        Ok(())
    }

    /// Devices the scenario needs, with the profiles it was designed for.
    pub fn profiles(&self) -> Vec<DeviceProfile> {
        match self.name.as_str() {
            "coffee" => vec![DeviceProfile::new(COFFEE_NODE_ID, Family::CoffeeNode)],
            "co2" => vec![DeviceProfile::new(CO2_NODE_ID, Family::LoraCO2)],
            _ => Vec::new(),
        }
    }
}

/// Grind, brew a full pot, pour four cups, take the pot away and return it empty.
pub fn coffee_scenario() -> ScenarioScript {
    let id = COFFEE_NODE_ID;
    let mut s = ScenarioScript::new("coffee")
        .step(19.5, id, json!({ "grinder_w": 150.0 }))
        .step(49.5, id, json!({ "grinder_w": 0.0 }))
        .step(59.5, id, json!({ "brewer_w": 900.0 }));
    const RAMP_STEPS: u32 = 90;
    for k in 1..=RAMP_STEPS {
        let t = 59.5 + 2.0 * f64::from(k);
        let coffee = crate::rts::coffee::FULL_COFFEE_KG * f64::from(k) / f64::from(RAMP_STEPS);
        let fields = if k == RAMP_STEPS {
            json!({ "coffee_kg": coffee, "brewer_w": 0.0 })
        } else {
            json!({ "coffee_kg": coffee })
        };
        s = s.step(t, id, fields);
    }
    for (i, t) in [300.5, 360.5, 420.5, 480.5].into_iter().enumerate() {
        let left = crate::rts::coffee::FULL_COFFEE_KG - crate::rts::coffee::CUP_KG * (i + 1) as f64;
        s = s.step(t, id, json!({ "coffee_kg": left }));
    }
    s = s
        .step(540.5, id, json!({ "pot_present": false }))
        .step(600.5, id, json!({ "pot_present": true, "coffee_kg": 0.0 }));
    s.duration_s = 660.0;
    s.ground_truth = [
        COFFEE_GRINDING,
        NEW_POT,
        POT_POURED,
        POT_POURED,
        POT_POURED,
        POT_POURED,
        POT_REMOVED,
        POT_EMPTY,
    ]
    .map(String::from)
    .to_vec();
    s
}

/// CO₂ readings of 900, 1100, 1200 and 950 ppm, then back to ambient.
pub fn co2_excursion_scenario() -> ScenarioScript {
    let id = CO2_NODE_ID;
    let mut s = ScenarioScript::new("co2")
        .step(5.5, id, json!({ "co2": 900 }))
        .step(10.5, id, json!({ "co2": 1100 }))
        .step(15.5, id, json!({ "co2": 1200 }))
        .step(20.5, id, json!({ "co2": 950 }))
        .step(25.5, id, json!({ "co2": null }));
    s.duration_s = 30.0;
    s.ground_truth = vec![THRESHOLD_CROSSED.into(), THRESHOLD_CLEARED.into()];
    s
}

pub fn scenario_by_name(name: &str) -> Option<ScenarioScript> {
    match name {
        "coffee" => Some(coffee_scenario()),
        "co2" => Some(co2_excursion_scenario()),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub device_id: String,
    pub sim_t0: u64,
    pub topic: String,
    pub scripted: bool,
    /// Reading time carried in the payload.
    pub ts: u64,
}

/// Per-device RNG seed derived from the fleet seed.
pub fn device_seed(seed: u64, device_id: &str) -> u64 {
    device_id
        .bytes()
        .fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| h.rotate_left(7).wrapping_mul(0x100_0000_01b3) ^ u64::from(b))
}

/// Value model of one device; produces its payloads.
pub struct DeviceSim {
    profile: DeviceProfile,
    rng: ChaCha8Rng,
    natural: Map<String, Value>,
    pinned: Map<String, Value>,
    energy_total_kwh: f64,
    noise: Normal<f64>,
}

fn num(fields: &Map<String, Value>, key: &str) -> f64 {
    fields.get(key).and_then(Value::as_f64).unwrap_or(0.0)
}

fn flag(fields: &Map<String, Value>, key: &str) -> bool {
    fields.get(key).and_then(Value::as_bool).unwrap_or(false)
}

impl DeviceSim {
    pub fn new(profile: DeviceProfile, seed: u64) -> Self {
        let sigma = profile.noise_kg.unwrap_or(DEFAULT_NOISE_KG).max(0.0);
        let natural = match profile.family {
            Family::SmartPlug => json!({ "power_w": 38.5, "voltage_v": 230.0 }),
            Family::LoraCO2 => json!({ "co2": 600.0, "temperature": 21.5, "humidity": 40.0 }),
            Family::LoraTemp => json!({ "temperature": 21.5, "humidity": 40.0 }),
            Family::LoraOccupancy => json!({ "occupancy": 0 }),
            Family::ZigbeeMotion => json!({ "presence": false }),
            Family::ZigbeeDoor => json!({ "open": false }),
            Family::DeepDish => json!({ "count": 0 }),
            Family::CoffeeNode => serde_json::to_value(CoffeePotState::default()).expect("state serializes"),
        };
        let Value::Object(natural) = natural else { unreachable!() };
        Self {
            rng: ChaCha8Rng::seed_from_u64(device_seed(seed, &profile.device_id)),
            profile,
            natural,
            pinned: Map::new(),
            energy_total_kwh: 12.5,
            noise: Normal::new(0.0, sigma).expect("sigma is non-negative"),
        }
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    /// Pins fields until released by a `null`.
    pub fn apply(&mut self, fields: &Map<String, Value>) {
        for (k, v) in fields {
            if v.is_null() {
                self.pinned.remove(k);
            } else {
                self.pinned.insert(k.clone(), v.clone());
            }
        }
    }

    fn wander(&mut self) {
        let rng = &mut self.rng;
        let n = &mut self.natural;
        match self.profile.family {
            Family::SmartPlug => {
                let p = (38.5 + rng.random_range(-2.0..2.0_f64)).max(0.0);
                n.insert("power_w".into(), json!((p * 10.0).round() / 10.0));
                n.insert("voltage_v".into(), json!(230.0 + rng.random_range(-1.0..1.0_f64).round()));
            }
            Family::LoraCO2 | Family::LoraTemp => {
                if self.profile.family == Family::LoraCO2 {
                    let co2 = num(n, "co2");
                    let next = (co2 + rng.random_range(-15.0..15.0) + (600.0 - co2) * 0.1).clamp(400.0, 800.0);
                    n.insert("co2".into(), json!(next.round()));
                }
                let t = num(n, "temperature") + rng.random_range(-0.1..0.1) + (21.5 - num(n, "temperature")) * 0.1;
                n.insert("temperature".into(), json!((t * 10.0).round() / 10.0));
                let h = num(n, "humidity") + rng.random_range(-0.5..0.5) + (40.0 - num(n, "humidity")) * 0.1;
                n.insert("humidity".into(), json!(h.round()));
            }
            Family::LoraOccupancy => {
                if rng.random_bool(0.1) {
                    let occ = 1 - n.get("occupancy").and_then(Value::as_i64).unwrap_or(0);
                    n.insert("occupancy".into(), json!(occ));
                }
            }
            Family::ZigbeeMotion | Family::ZigbeeDoor => {
                let key = if self.profile.family == Family::ZigbeeMotion { "presence" } else { "open" };
                if rng.random_bool(0.1) {
                    let v = !flag(n, key);
                    n.insert(key.into(), json!(v));
                }
            }
            Family::DeepDish => {
                let c = n.get("count").and_then(Value::as_i64).unwrap_or(0);
                let next = (c + rng.random_range(-1..=1)).clamp(0, 30);
                n.insert("count".into(), json!(next));
            }
            Family::CoffeeNode => {}
        }
    }

    fn fields(&self) -> Map<String, Value> {
        let mut out = self.natural.clone();
        for (k, v) in &self.pinned {
            out.insert(k.clone(), v.clone());
        }
        out
    }

    /// Next reading. `ts` is the reading time, `sim_t0` the host generation time.
    pub fn emit(&mut self, ts: u64, sim_t0: u64, ttn_app: &str) -> (TopicName, Value) {
        self.wander();
        let f = self.fields();
        let id = self.profile.device_id.clone();
        let payload = match self.profile.family {
            Family::SmartPlug => {
                let power = num(&f, "power_w");
                let voltage = num(&f, "voltage_v").max(1.0);
                self.energy_total_kwh += power / 3_600_000.0 * self.profile.period_s;
                json!({
                    "Time": to_datetime(ts).format("%Y-%m-%dT%H:%M:%S").to_string(),
                    "ENERGY": {
                        "Total": (self.energy_total_kwh * 1000.0).round() / 1000.0,
                        "Power": power,
                        "Factor": 0.95,
                        "Voltage": voltage,
                        "Current": ((power / voltage) * 1000.0).round() / 1000.0,
                    },
                    "sim_t0": sim_t0,
                })
            }
            Family::LoraCO2 | Family::LoraTemp | Family::LoraOccupancy => {
                let mut decoded = f.clone();
                decoded.retain(|_, v| !v.is_null());
                json!({
                    "end_device_ids": { "device_id": id, "application_ids": { "application_id": ttn_app } },
                    "received_at": to_rfc3339(ts),
                    "uplink_message": {
                        "f_port": 1,
                        "decoded_payload": decoded,
                        "received_at": to_rfc3339(ts),
                    },
                    "sim_t0": sim_t0,
                })
            }
            Family::ZigbeeMotion | Family::ZigbeeDoor => {
                let key = if self.profile.family == Family::ZigbeeMotion { "presence" } else { "open" };
                json!({
                    "e": "changed",
                    "r": "sensors",
                    "id": id,
                    "state": {
                        key: flag(&f, key),
                        "lastupdated": to_datetime(ts).format("%Y-%m-%dT%H:%M:%S%.3f").to_string(),
                    },
                    "sim_t0": sim_t0,
                })
            }
            Family::DeepDish => json!({ "count": f.get("count").cloned().unwrap_or(json!(0)), "ts": ts, "sim_t0": sim_t0 }),
            Family::CoffeeNode => {
                let state = CoffeePotState {
                    pot_present: f.get("pot_present").and_then(Value::as_bool).unwrap_or(true),
                    coffee_kg: num(&f, "coffee_kg"),
                    grinder_w: num(&f, "grinder_w"),
                    brewer_w: num(&f, "brewer_w"),
                };
                let weight = (state.true_weight() + self.noise.sample(&mut self.rng)).max(0.0);
                json!({
                    "weight_kg": (weight * 1000.0).round() / 1000.0,
                    "grinder_w": state.grinder_w,
                    "brewer_w": state.brewer_w,
                    "ts": ts,
                    "sim_t0": sim_t0,
                })
            }
        };
        (self.profile.topic(ttn_app), payload)
    }
}

/// One planned emission of a device, in simulated seconds from the run start.
#[derive(Debug, Clone, PartialEq)]
pub struct Planned {
    pub at_s: f64,
    pub script: Option<Map<String, Value>>,
}

/// Periodic ticks (random phase, uniform jitter) merged with the device's script steps.
pub fn device_plan(profile: &DeviceProfile, script: Option<&ScenarioScript>, duration_s: f64, seed: u64) -> Vec<Planned> {
    let mut rng = ChaCha8Rng::seed_from_u64(device_seed(seed, &profile.device_id).rotate_left(17));
    let phase = rng.random_range(0.0..profile.period_s);
    let mut plan = Vec::new();
    let mut k = 0u64;
    loop {
        let nominal = phase + k as f64 * profile.period_s;
        if nominal >= duration_s {
            break;
        }
        let jitter = if profile.jitter_s > 0.0 {
            rng.random_range(-profile.jitter_s..=profile.jitter_s)
        } else {
            0.0
        };
        plan.push(Planned {
            at_s: (nominal + jitter).max(0.0),
            script: None,
        });
        k += 1;
    }
    if let Some(script) = script {
        for s in script.steps.iter().filter(|s| s.device_id == profile.device_id) {
            if s.t_offset_s < duration_s {
                plan.push(Planned {
                    at_s: s.t_offset_s,
                    script: Some(s.fields.clone()),
                });
            }
        }
    }
    plan.sort_by(|a, b| a.at_s.total_cmp(&b.at_s).then(b.script.is_some().cmp(&a.script.is_some())));
    plan
}

/// Runs the fleet without transports or wall-clock waits. Reading times start
/// at `start_ms`; `sim_t0` equals the reading time.
pub fn render_offline(
    profiles: &[DeviceProfile],
    script: Option<&ScenarioScript>,
    duration_s: f64,
    seed: u64,
    start_ms: u64,
    ttn_app: &str,
) -> Vec<(EmissionRecord, RawSensorMessage)> {
    let mut out = Vec::new();
    for profile in profiles {
        let mut sim = DeviceSim::new(profile.clone(), seed);
        let mut last_t0 = 0;
        for planned in device_plan(profile, script, duration_s, seed) {
            if let Some(fields) = &planned.script {
                sim.apply(fields);
            }
            let ts = start_ms + (planned.at_s * 1000.0).round() as u64;
            let t0 = ts.max(last_t0 + 1);
            last_t0 = t0;
            let (topic, payload) = sim.emit(ts, t0, ttn_app);
            let record = EmissionRecord {
                device_id: profile.device_id.clone(),
                sim_t0: t0,
                topic: topic.as_str().to_owned(),
                scripted: planned.script.is_some(),
                ts,
            };
            out.push((record, RawSensorMessage::new(topic, serde_json::to_vec(&payload).expect("payload serializes"), ts)));
        }
    }
    out.sort_by_key(|(r, _)| r.ts);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::DecoderRegistry;
    use crate::rts::{CoffeeState, COFFEE_LEVEL};

    const START: u64 = 1_591_005_600_000;

    #[test]
    fn every_family_decodes() {
        let registry = DecoderRegistry::with_builtin();
        let profiles: Vec<_> = Family::ALL
            .iter()
            .map(|f| DeviceProfile::new(format!("{}-1", f.short()), *f))
            .collect();
        for (record, raw) in render_offline(&profiles, None, 20.0, 3, START, "app") {
            let m = registry.process(&raw).unwrap_or_else(|d| panic!("{}: {}", record.topic, d.reason));
            assert_eq!(m.device_id, record.device_id);
            assert_eq!(m.sim_t0, Some(record.sim_t0));
            assert_eq!(m.ts / 1000, record.ts / 1000);
        }
    }

    #[test]
    fn payload_shapes() {
        let mut plug = DeviceSim::new(DeviceProfile::new("plug-17", Family::SmartPlug), 1);
        let (topic, p) = plug.emit(START, START, "app");
        assert_eq!(topic.as_str(), "tele/plug-17/SENSOR");
        assert_eq!(p["Time"], "2020-06-01T10:00:00");
        assert!(p["ENERGY"]["Power"].is_number());
        let mut co2 = DeviceSim::new(DeviceProfile::new("d1", Family::LoraCO2), 1);
        let (topic, p) = co2.emit(START, START, "app");
        assert_eq!(topic.as_str(), "v3/app/devices/d1/up");
        assert_eq!(p["end_device_ids"]["device_id"], "d1");
        assert!(p["uplink_message"]["decoded_payload"]["co2"].is_number());
        let mut motion = DeviceSim::new(DeviceProfile::new("m1", Family::ZigbeeMotion), 1);
        let (_, p) = motion.emit(START, START, "app");
        assert_eq!(p["e"], "changed");
        assert_eq!(p["r"], "sensors");
        assert!(p["state"]["presence"].is_boolean());
        assert_eq!(p["sim_t0"], START);
    }

    #[test]
    fn emission_count_per_device() {
        for period in [0.3, 1.0, 2.5] {
            let p = DeviceProfile::new("x", Family::SmartPlug).period(period).jitter(period / 4.0);
            for seed in 0..20 {
                let n = device_plan(&p, None, 60.0, seed).len() as i64;
                let expected = (60.0 / period).floor() as i64;
                assert!((n - expected).abs() <= 1, "period {period} seed {seed}: {n}");
            }
        }
        let fleet = standard_fleet(45);
        let total: usize = fleet.iter().map(|p| device_plan(p, None, 60.0, 1).len()).sum();
        assert!((2655..=2745).contains(&total), "{total}");
        assert!(render_offline(&[], None, 60.0, 1, START, "app").is_empty());
    }

    #[test]
    fn one_override_one_scripted_payload() {
        let p = DeviceProfile::new("plug", Family::SmartPlug);
        let script = ScenarioScript::new("t").step(5.0, "plug", json!({ "power_w": 0.0 }));
        let log = render_offline(&[p], Some(&script), 10.0, 1, START, "app");
        assert_eq!(log.iter().filter(|(r, _)| r.scripted).count(), 1);
        // the pin sticks for later periodic readings
        let last: Value = serde_json::from_slice(&log.last().unwrap().1.payload).unwrap();
        assert_eq!(last["ENERGY"]["Power"], 0.0);
    }

    #[test]
    fn null_releases_a_pin() {
        let p = DeviceProfile::new(CO2_NODE_ID, Family::LoraCO2);
        let script = co2_excursion_scenario();
        let log = render_offline(&[p], Some(&script), script.duration_s, 1, START, "app");
        let co2: Vec<f64> = log
            .iter()
            .map(|(_, raw)| {
                let v: Value = serde_json::from_slice(&raw.payload).unwrap();
                v["uplink_message"]["decoded_payload"]["co2"].as_f64().unwrap()
            })
            .collect();
        assert!(co2.contains(&1200.0));
        assert!(*co2.last().unwrap() < 1000.0);
    }

    #[test]
    fn script_validation() {
        let p = vec![DeviceProfile::new("a", Family::SmartPlug)];
        let bad = ScenarioScript::new("x").step(5.0, "a", json!({})).step(4.0, "a", json!({}));
        assert!(matches!(bad.validate(&p), Err(SimError::ScriptOrder { .. })));
        let unknown = ScenarioScript::new("x").step(5.0, "b", json!({}));
        assert!(matches!(unknown.validate(&p), Err(SimError::UnknownScriptDevice(_))));
        assert!(coffee_scenario().validate(&coffee_scenario().profiles()).is_ok());
        assert!(DeviceProfile::new("a/b", Family::SmartPlug).validate().is_err());
        assert!(DeviceProfile::new("a", Family::SmartPlug).period(0.0).validate().is_err());
        let dup = vec![p[0].clone(), p[0].clone()];
        assert!(matches!(validate_fleet(&dup), Err(SimError::DuplicateDevice(_))));
    }

    fn coffee_weights(seed: u64) -> Vec<f64> {
        let s = coffee_scenario();
        render_offline(&s.profiles(), Some(&s), s.duration_s, seed, START, "app")
            .iter()
            .map(|(_, raw)| serde_json::from_slice::<Value>(&raw.payload).unwrap()["weight_kg"].as_f64().unwrap())
            .collect()
    }

    #[test]
    fn coffee_trace_shape() {
        let s = coffee_scenario();
        let log = render_offline(&s.profiles(), Some(&s), s.duration_s, 1, START, "app");
        let at = |t: f64| -> Value {
            let (_, raw) = log.iter().rev().find(|(r, _)| r.ts <= START + (t * 1000.0) as u64).unwrap();
            serde_json::from_slice(&raw.payload).unwrap()
        };
        let full = at(290.0)["weight_kg"].as_f64().unwrap();
        assert!((full - 2.5).abs() < 0.05, "{full}");
        assert!(at(30.0)["grinder_w"].as_f64().unwrap() > 40.0);
        let after_pour = at(330.0)["weight_kg"].as_f64().unwrap();
        assert!((full - after_pour - 0.25).abs() < 0.06);
        assert!(at(570.0)["weight_kg"].as_f64().unwrap() < 0.05);
        assert!((at(650.0)["weight_kg"].as_f64().unwrap() - 0.5).abs() < 0.05);
        assert_ne!(coffee_weights(1), coffee_weights(2));
        assert_eq!(coffee_weights(1), coffee_weights(1));
    }

    #[test]
    fn coffee_ground_truth_replays_through_detector() {
        let registry = DecoderRegistry::with_builtin();
        let s = coffee_scenario();
        for seed in 0..10 {
            let mut state = CoffeeState::default();
            let events: Vec<String> = render_offline(&s.profiles(), Some(&s), s.duration_s, seed, START, "app")
                .iter()
                .flat_map(|(_, raw)| state.step(&registry.process(raw).unwrap()))
                .filter(|e| e.event_type != COFFEE_LEVEL)
                .map(|e| e.event_type)
                .collect();
            assert_eq!(events, s.ground_truth, "seed {seed}");
        }
    }
}
