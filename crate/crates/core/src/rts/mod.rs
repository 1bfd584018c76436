//! The real-time server: an event bus shared by deployable verticles.
//!
//! Address vocabulary: `feed/<family>/<device_id>` for readings,
//! `event/<kind>/<scope>` for derived events and `sys/...` for internal notices.

mod bus;
pub mod coffee;
mod event;
pub mod feed;
pub mod filer;
pub mod monitor;
pub mod router;
pub mod threshold;
mod verticle;

pub use bus::{
    BusBody, BusEnvelope, BusStats, Delivery, EventBus, Publisher, StaleAction, Subscription,
    SubscriptionPolicy, SubscriptionReport, SubscriptionStats, DEFAULT_QUEUE_CAPACITY,
};
pub use coffee::{rtcoffee_step, CoffeeState, RtCoffee};
pub use event::*;
pub use feed::{feed_address, FeedHandler, FeedStats, FeedTap};
pub use filer::{FileStore, MessageFiler};
pub use monitor::{DataMonitor, MonitorClient, MonitorLine};
pub use router::{MessageRouter, Route};
pub use threshold::{ThresholdRule, ThresholdWatch};
pub use verticle::{Deployment, FnVerticle, Verticle, VerticleContext, VerticleFuture};

use crate::wire::TopicName;

pub const DEAD_LETTER_ADDRESS: &str = "feed/deadletter";

/// Makes an arbitrary string usable as one address level.
pub fn address_level(raw: &str) -> String {
    if raw.is_empty() {
        return "_".into();
    }
    raw.chars()
        .map(|c| if matches!(c, '/' | '+' | '#' | '\0') { '_' } else { c })
        .collect()
}

/// Joins sanitized levels into a bus address.
pub fn address(levels: &[&str]) -> TopicName {
    TopicName::from_levels(levels.iter().map(|l| address_level(l)))
        .expect("sanitized levels form a valid address")
}
