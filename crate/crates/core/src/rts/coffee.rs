//! RTCoffee: recognizes coffee-pot events from one weight and two power readings.
//!
//! The detector is a pure state machine over a median-of-3 smoothed weight and
//! debounced (not smoothed) grinder and brewer powers.

use std::collections::{HashMap, VecDeque};

use super::bus::{BusBody, SubscriptionPolicy};
use super::event::{
    DerivedEvent, COFFEE_GRINDING, COFFEE_LEVEL, NEW_POT, POT_EMPTY, POT_POURED, POT_REMOVED,
};
use super::verticle::{Verticle, VerticleContext, VerticleFuture};
use super::address;
use crate::decoders::NormalizedMessage;

/// Appliance power above which the grinder or brewer counts as running.
pub const ACTIVE_POWER_W: f64 = 40.0;
pub const POT_KG: f64 = 0.5;
pub const FULL_COFFEE_KG: f64 = 2.0;
pub const CUP_KG: f64 = 0.25;

pub const PRESENCE_KG: f64 = 0.25;
pub const DEBOUNCE_SAMPLES: u32 = 2;
pub const BREW_WINDOW_MS: u64 = 600_000;
pub const NEW_POT_RISE_KG: f64 = 1.0;
pub const POUR_MIN_KG: f64 = 0.15;
pub const POUR_MAX_KG: f64 = 0.6;
pub const SETTLE_SPREAD_KG: f64 = 0.05;
pub const EMPTY_TOLERANCE_KG: f64 = 0.1;
pub const LEVEL_STEP: f64 = 0.05;

const SOURCE: &str = "rtcoffee";
const SMOOTHING: usize = 3;
const SETTLE_WINDOW: usize = 3;

/// Two-sample debounced boolean.
#[derive(Debug, Clone, Default, PartialEq)]
struct Debounced {
    value: Option<bool>,
    disagreeing: u32,
}

impl Debounced {
    /// Returns `Some(new)` when the debounced value flips.
    fn update(&mut self, sample: bool) -> Option<bool> {
        match self.value {
            None => {
                self.value = Some(sample);
                None
            }
            Some(current) if current == sample => {
                self.disagreeing = 0;
                None
            }
            Some(_) => {
                self.disagreeing += 1;
                if self.disagreeing >= DEBOUNCE_SAMPLES {
                    self.disagreeing = 0;
                    self.value = Some(sample);
                    Some(sample)
                } else {
                    None
                }
            }
        }
    }

    fn is(&self) -> bool {
        self.value.unwrap_or(false)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoffeeState {
    raw_weights: VecDeque<f64>,
    smoothed: VecDeque<f64>,
    present: Debounced,
    last_settled: Option<f64>,
    empty: Option<bool>,
    grinder: Debounced,
    brewer: Debounced,
    brew_baseline: Option<f64>,
    brewer_seen_at: Option<u64>,
    level: Option<f64>,
}

fn median(window: &VecDeque<f64>) -> f64 {
    let mut sorted: Vec<f64> = window.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    sorted[sorted.len() / 2]
}

pub fn coffee_level(w: f64) -> f64 {
    ((w - POT_KG) / FULL_COFFEE_KG).clamp(0.0, 1.0)
}

impl CoffeeState {
    pub fn step(&mut self, m: &NormalizedMessage) -> Vec<DerivedEvent> {
        let mut events = Vec::new();
        if m.family != "coffee" {
            return events;
        }
        let event = |kind: &str| DerivedEvent::new(kind, m.device_id.clone(), m.ts, SOURCE);

        if let Some(grinder_w) = m.number("grinder_w") {
            if self.grinder.update(grinder_w > ACTIVE_POWER_W) == Some(true) {
                events.push(event(COFFEE_GRINDING).with("grinder_w", grinder_w));
            }
        }

        let weight = m.number("weight_kg").map(|raw| {
            self.raw_weights.push_back(raw);
            if self.raw_weights.len() > SMOOTHING {
                self.raw_weights.pop_front();
            }
            median(&self.raw_weights)
        });

        if let Some(brewer_w) = m.number("brewer_w") {
            if brewer_w > ACTIVE_POWER_W {
                self.brewer_seen_at = Some(m.ts);
            }
            if self.brewer.update(brewer_w > ACTIVE_POWER_W) == Some(true) {
                self.brew_baseline = weight.or(self.smoothed.back().copied());
            }
        }

        let Some(w) = weight else { return events };

        if let Some(baseline) = self.brew_baseline {
            let recent = self
                .brewer_seen_at
                .is_some_and(|seen| m.ts.saturating_sub(seen) <= BREW_WINDOW_MS);
            if !recent {
                self.brew_baseline = None;
            } else if w >= baseline + NEW_POT_RISE_KG {
                self.brew_baseline = None;
                events.push(event(NEW_POT).with("weight_kg", w));
            }
        }

        let sample_present = w >= PRESENCE_KG;
        match self.present.update(sample_present) {
            Some(false) => {
                self.last_settled = None;
                self.smoothed.clear();
                events.push(event(POT_REMOVED));
            }
            Some(true) => {
                self.smoothed.clear();
            }
            None => {}
        }

        if self.present.is() {
            self.smoothed.push_back(w);
            if self.smoothed.len() > SETTLE_WINDOW {
                self.smoothed.pop_front();
            }
            if self.smoothed.len() == SETTLE_WINDOW {
                let lo = self.smoothed.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = self.smoothed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if hi - lo <= SETTLE_SPREAD_KG {
                    let settled = self.smoothed.iter().sum::<f64>() / SETTLE_WINDOW as f64;
                    if let Some(previous) = self.last_settled {
                        let drop = previous - settled;
                        if (POUR_MIN_KG..=POUR_MAX_KG).contains(&drop) {
                            events.push(
                                event(POT_POURED)
                                    .with("drop_kg", drop)
                                    .with("cups", (drop / CUP_KG).round()),
                            );
                        }
                    }
                    self.last_settled = Some(settled);
                }
            }
        }

        let empty = self.present.is() && sample_present && w - POT_KG <= EMPTY_TOLERANCE_KG;
        if self.empty == Some(false) && empty {
            events.push(event(POT_EMPTY));
        }
        self.empty = Some(empty);

        let level = coffee_level(w);
        match self.level {
            None => self.level = Some(level),
            Some(previous) if (level - previous).abs() >= LEVEL_STEP - 1e-9 => {
                self.level = Some(level);
                events.push(event(COFFEE_LEVEL).with("level", level));
            }
            Some(_) => {}
        }

        events
    }
}

/// Pure form of [`CoffeeState::step`].
pub fn rtcoffee_step(state: &CoffeeState, m: &NormalizedMessage) -> (CoffeeState, Vec<DerivedEvent>) {
    let mut next = state.clone();
    let events = next.step(m);
    (next, events)
}

#[derive(Default)]
pub struct RtCoffee;

impl Verticle for RtCoffee {
    fn name(&self) -> &str {
        SOURCE
    }

    fn start(self: Box<Self>, ctx: VerticleContext) -> VerticleFuture {
        let sub = ctx.subscribe(SubscriptionPolicy::new(["feed/coffee/#"]).expect("valid filter"));
        let publisher = ctx.publisher();
        Box::pin(async move {
            let mut states: HashMap<String, CoffeeState> = HashMap::new();
            while let Some(delivery) = sub.recv().await {
                let Some(m) = delivery.body.reading() else { continue };
                let events = states.entry(m.device_id.clone()).or_default().step(m);
                for e in events {
                    publisher.publish(address(&["event", "coffee", &m.device_id]), BusBody::Event(e));
                }
            }
        })
    }
}
