//! ThresholdWatch: edge-triggered threshold events with hysteresis.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::bus::{BusBody, SubscriptionPolicy};
use super::event::{DerivedEvent, THRESHOLD_CLEARED, THRESHOLD_CROSSED};
use super::verticle::{Verticle, VerticleContext, VerticleFuture};
use super::address;
use crate::wire::{TopicFilter, WireError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparison {
    #[serde(rename = ">")]
    Above,
    #[serde(rename = "<")]
    Below,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRule {
    #[serde(default)]
    pub name: Option<String>,
    pub filter: TopicFilter,
    pub field: String,
    pub op: Comparison,
    pub value: f64,
    #[serde(default)]
    pub hysteresis: f64,
}

impl ThresholdRule {
    pub fn new(filter: &str, field: &str, op: Comparison, value: f64, hysteresis: f64) -> Result<Self, WireError> {
        Ok(Self {
            name: None,
            filter: TopicFilter::new(filter)?,
            field: field.to_owned(),
            op,
            value,
            hysteresis: hysteresis.abs(),
        })
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            let op = match self.op {
                Comparison::Above => ">",
                Comparison::Below => "<",
            };
            format!("{}{}{}", self.field, op, self.value)
        })
    }

    fn beyond(&self, v: f64) -> bool {
        match self.op {
            Comparison::Above => v > self.value,
            Comparison::Below => v < self.value,
        }
    }

    fn back_inside(&self, v: f64) -> bool {
        match self.op {
            Comparison::Above => v <= self.value - self.hysteresis,
            Comparison::Below => v >= self.value + self.hysteresis,
        }
    }
}

pub fn rules_from_json(raw: &str) -> Result<Vec<ThresholdRule>, serde_json::Error> {
    serde_json::from_str(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Crossed,
    Cleared,
}

/// One step of the edge detector. `crossed` is the current state.
pub fn threshold_step(rule: &ThresholdRule, crossed: bool, v: f64) -> (bool, Option<Edge>) {
    if !crossed && rule.beyond(v) {
        (true, Some(Edge::Crossed))
    } else if crossed && rule.back_inside(v) {
        (false, Some(Edge::Cleared))
    } else {
        (crossed, None)
    }
}

#[derive(Debug, Default)]
pub struct ThresholdStats {
    pub evaluated: AtomicU64,
    pub missing_field: AtomicU64,
    pub events: AtomicU64,
}

pub struct ThresholdWatch {
    rules: Vec<ThresholdRule>,
    stats: Arc<ThresholdStats>,
}

impl ThresholdWatch {
    pub fn new(rules: Vec<ThresholdRule>) -> Self {
        Self {
            rules,
            stats: Arc::default(),
        }
    }

    pub fn stats(&self) -> Arc<ThresholdStats> {
        Arc::clone(&self.stats)
    }
}

impl Verticle for ThresholdWatch {
    fn name(&self) -> &str {
        "thresholdwatch"
    }

    fn start(self: Box<Self>, ctx: VerticleContext) -> VerticleFuture {
        if self.rules.is_empty() {
            return Box::pin(async {});
        }
        let sub = ctx.subscribe(
            SubscriptionPolicy::new(self.rules.iter().map(|r| r.filter.as_str()))
                .expect("rule filters are already validated"),
        );
        let publisher = ctx.publisher();
        Box::pin(async move {
            let mut state: HashMap<(usize, String), bool> = HashMap::new();
            while let Some(delivery) = sub.recv().await {
                let Some(m) = delivery.body.reading() else { continue };
                for (i, rule) in self.rules.iter().enumerate() {
                    if !rule.filter.matches(&delivery.address) {
                        continue;
                    }
                    let Some(v) = m.number(&rule.field) else {
                        self.stats.missing_field.fetch_add(1, Ordering::Relaxed);
                        continue;
                    };
                    self.stats.evaluated.fetch_add(1, Ordering::Relaxed);
                    let crossed = state.entry((i, m.device_id.clone())).or_insert(false);
                    let (next, edge) = threshold_step(rule, *crossed, v);
                    *crossed = next;
                    let Some(edge) = edge else { continue };
                    let kind = match edge {
                        Edge::Crossed => THRESHOLD_CROSSED,
                        Edge::Cleared => THRESHOLD_CLEARED,
                    };
                    let event = DerivedEvent::new(kind, m.device_id.clone(), m.ts, "thresholdwatch")
                        .with("rule", rule.label().as_str())
                        .with("field", rule.field.as_str())
                        .with("value", v)
                        .with("threshold", rule.value);
                    self.stats.events.fetch_add(1, Ordering::Relaxed);
                    publisher.publish(
                        address(&["event", "threshold", &m.device_id]),
                        BusBody::Event(event),
                    );
                }
            }
        })
    }
}
