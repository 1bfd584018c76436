use serde::{Deserialize, Serialize};

use crate::decoders::{Cooked, Reading};

pub const COFFEE_GRINDING: &str = "coffee-grinding";
pub const NEW_POT: &str = "new-pot";
pub const POT_POURED: &str = "pot-poured";
pub const POT_REMOVED: &str = "pot-removed";
pub const POT_EMPTY: &str = "pot-empty";
pub const COFFEE_LEVEL: &str = "coffee-level";
pub const THRESHOLD_CROSSED: &str = "threshold-crossed";
pub const THRESHOLD_CLEARED: &str = "threshold-cleared";

/// Every event type a verticle may emit.
pub const EVENT_VOCABULARY: &[&str] = &[
    COFFEE_GRINDING,
    NEW_POT,
    POT_POURED,
    POT_REMOVED,
    POT_EMPTY,
    COFFEE_LEVEL,
    THRESHOLD_CROSSED,
    THRESHOLD_CLEARED,
];

/// Output of a stream-processing verticle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedEvent {
    pub event_type: String,
    pub scope: String,
    pub ts: u64,
    pub attributes: Cooked,
    pub source_verticle: String,
}

impl DerivedEvent {
    pub fn new(event_type: &str, scope: impl Into<String>, ts: u64, source: &str) -> Self {
        debug_assert!(
            EVENT_VOCABULARY.contains(&event_type),
            "unregistered event type {event_type}"
        );
        Self {
            event_type: event_type.to_owned(),
            scope: scope.into(),
            ts: ts.max(1),
            attributes: Cooked::new(),
            source_verticle: source.to_owned(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Reading>) -> Self {
        self.attributes.insert(key.to_owned(), value.into());
        self
    }
}
