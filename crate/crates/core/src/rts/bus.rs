//! The shared message-box: one bus, one bounded queue per subscription.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;

use super::event::DerivedEvent;
use crate::clock::{Clock, HostClock};
use crate::decoders::{DeadLetter, NormalizedMessage};
use crate::queue::Overflow;
use crate::wire::{TopicFilter, TopicName, WireError};

pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BusBody {
    Reading(NormalizedMessage),
    Event(DerivedEvent),
    DeadLetter(DeadLetter),
    Json(serde_json::Value),
}

impl BusBody {
    pub fn reading(&self) -> Option<&NormalizedMessage> {
        match self {
            BusBody::Reading(m) => Some(m),
            _ => None,
        }
    }

    pub fn event(&self) -> Option<&DerivedEvent> {
        match self {
            BusBody::Event(e) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BusEnvelope {
    pub address: TopicName,
    pub body: BusBody,
    pub published_at: u64,
    pub seq: u64,
    pub publisher: u64,
}

/// An envelope handed to one subscriber.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub envelope: Arc<BusEnvelope>,
    /// Older than the subscription's timeliness bound.
    pub stale: bool,
}

impl std::ops::Deref for Delivery {
    type Target = BusEnvelope;

    fn deref(&self) -> &BusEnvelope {
        &self.envelope
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StaleAction {
    #[default]
    DropCounted,
    DeliverFlagged,
}

#[derive(Debug, Clone)]
pub struct SubscriptionPolicy {
    pub filters: Vec<TopicFilter>,
    pub queue_capacity: usize,
    pub overflow: Overflow,
    pub timeliness_bound_ms: Option<u64>,
    pub stale_action: StaleAction,
}

impl SubscriptionPolicy {
    pub fn new<I, S>(filters: I) -> Result<Self, WireError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let filters = filters
            .into_iter()
            .map(|f| TopicFilter::new(f.as_ref()))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            filters,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            overflow: Overflow::DropOldest,
            timeliness_bound_ms: None,
            stale_action: StaleAction::DropCounted,
        })
    }

    /// A subscription that starts with no filters.
    pub fn empty() -> Self {
        Self::new(std::iter::empty::<&str>()).expect("no filters to validate")
    }

    pub fn capacity(mut self, capacity: usize) -> Self {
        self.queue_capacity = capacity.max(1);
        self
    }

    pub fn overflow(mut self, overflow: Overflow) -> Self {
        self.overflow = overflow;
        self
    }

    pub fn timeliness(mut self, bound_ms: u64, action: StaleAction) -> Self {
        self.timeliness_bound_ms = Some(bound_ms);
        self.stale_action = action;
        self
    }
}

/// Per-subscription counters. `offered = delivered + dropped + stale_dropped + queued`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct SubscriptionStats {
    pub offered: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub stale_dropped: u64,
    pub stale_flagged: u64,
    pub queued: u64,
}

impl SubscriptionStats {
    pub fn balanced(&self) -> bool {
        self.offered == self.delivered + self.dropped + self.stale_dropped + self.queued
    }
}

struct SubState {
    items: VecDeque<Arc<BusEnvelope>>,
    stats: SubscriptionStats,
}

pub(crate) struct SubShared {
    id: u64,
    label: String,
    filters: RwLock<Vec<TopicFilter>>,
    capacity: usize,
    overflow: Overflow,
    timeliness_bound_ms: Option<u64>,
    stale_action: StaleAction,
    state: Mutex<SubState>,
    notify: Notify,
    closed: AtomicBool,
}

impl SubShared {
    fn matches(&self, address: &TopicName) -> bool {
        self.filters.read().iter().any(|f| f.matches(address))
    }

    fn offer(&self, envelope: &Arc<BusEnvelope>) {
        {
            let mut state = self.state.lock();
            state.stats.offered += 1;
            if state.items.len() >= self.capacity {
                state.stats.dropped += 1;
                match self.overflow {
                    Overflow::DropOldest => {
                        state.items.pop_front();
                    }
                    Overflow::DropNewest => return,
                }
            }
            state.items.push_back(Arc::clone(envelope));
        }
        self.notify.notify_one();
    }

    fn take(&self, clock: &dyn Clock) -> Option<Delivery> {
        let mut state = self.state.lock();
        loop {
            let envelope = state.items.pop_front()?;
            let stale = self
                .timeliness_bound_ms
                .is_some_and(|bound| clock.now_ms().saturating_sub(envelope.published_at) > bound);
            if stale && self.stale_action == StaleAction::DropCounted {
                state.stats.stale_dropped += 1;
                continue;
            }
            state.stats.delivered += 1;
            if stale {
                state.stats.stale_flagged += 1;
            }
            return Some(Delivery { envelope, stale });
        }
    }

    fn stats(&self) -> SubscriptionStats {
        let state = self.state.lock();
        SubscriptionStats {
            queued: state.items.len() as u64,
            ..state.stats
        }
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.notify.notify_waiters();
        self.notify.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BusStats {
    pub published: u64,
    pub offered: u64,
    pub live_subscriptions: usize,
}

/// Snapshot of one subscription for audits.
#[derive(Debug, Clone, Serialize)]
pub struct SubscriptionReport {
    pub id: u64,
    pub label: String,
    pub closed: bool,
    pub stats: SubscriptionStats,
}

struct BusInner {
    subs: RwLock<Vec<Arc<SubShared>>>,
    retired: Mutex<Vec<Arc<SubShared>>>,
    next_id: AtomicU64,
    published: AtomicU64,
    offered: AtomicU64,
    clock: Arc<dyn Clock>,
}

/// In-process publish/subscribe bus; cheap to clone.
#[derive(Clone)]
pub struct EventBus {
    inner: Arc<BusInner>,
}

impl Default for EventBus {
    fn default() -> Self {
        Self::new()
    }
}

impl EventBus {
    pub fn new() -> Self {
        Self::with_clock(Arc::new(HostClock))
    }

    pub fn with_clock(clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Arc::new(BusInner {
                subs: RwLock::new(Vec::new()),
                retired: Mutex::new(Vec::new()),
                next_id: AtomicU64::new(1),
                published: AtomicU64::new(0),
                offered: AtomicU64::new(0),
                clock,
            }),
        }
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.inner.clock
    }

    pub fn publisher(&self, name: impl Into<String>) -> Publisher {
        Publisher {
            bus: self.clone(),
            id: self.inner.next_id.fetch_add(1, Ordering::Relaxed),
            name: name.into(),
            seq: Arc::new(AtomicU64::new(0)),
        }
    }

    pub fn subscribe(&self, label: impl Into<String>, policy: SubscriptionPolicy) -> Subscription {
        let shared = Arc::new(SubShared {
            id: self.inner.next_id.fetch_add(1, Ordering::Relaxed),
            label: label.into(),
            filters: RwLock::new(policy.filters),
            capacity: policy.queue_capacity.max(1),
            overflow: policy.overflow,
            timeliness_bound_ms: policy.timeliness_bound_ms,
            stale_action: policy.stale_action,
            state: Mutex::new(SubState {
                items: VecDeque::new(),
                stats: SubscriptionStats::default(),
            }),
            notify: Notify::new(),
            closed: AtomicBool::new(false),
        });
        self.inner.subs.write().push(Arc::clone(&shared));
        Subscription {
            shared,
            bus: self.clone(),
        }
    }

    fn unsubscribe(&self, shared: &Arc<SubShared>) {
        shared.close();
        let mut subs = self.inner.subs.write();
        if let Some(pos) = subs.iter().position(|s| Arc::ptr_eq(s, shared)) {
            let removed = subs.swap_remove(pos);
            self.inner.retired.lock().push(removed);
        }
    }

    fn dispatch(&self, envelope: BusEnvelope) -> usize {
        let envelope = Arc::new(envelope);
        self.inner.published.fetch_add(1, Ordering::Relaxed);
        let mut targets = 0;
        for sub in self.inner.subs.read().iter() {
            if sub.matches(&envelope.address) {
                sub.offer(&envelope);
                targets += 1;
            }
        }
        self.inner.offered.fetch_add(targets as u64, Ordering::Relaxed);
        targets
    }

    pub fn stats(&self) -> BusStats {
        BusStats {
            published: self.inner.published.load(Ordering::Relaxed),
            offered: self.inner.offered.load(Ordering::Relaxed),
            live_subscriptions: self.inner.subs.read().len(),
        }
    }

    /// Every subscription ever opened on this bus, live ones first.
    pub fn subscription_reports(&self) -> Vec<SubscriptionReport> {
        let report = |s: &Arc<SubShared>, closed| SubscriptionReport {
            id: s.id,
            label: s.label.clone(),
            closed,
            stats: s.stats(),
        };
        let mut out: Vec<_> = self.inner.subs.read().iter().map(|s| report(s, false)).collect();
        out.extend(self.inner.retired.lock().iter().map(|s| report(s, true)));
        out
    }
}

/// Publishing handle with its own sequence counter.
#[derive(Clone)]
pub struct Publisher {
    bus: EventBus,
    id: u64,
    name: String,
    seq: Arc<AtomicU64>,
}

impl Publisher {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn bus(&self) -> &EventBus {
        &self.bus
    }

    /// Enqueues to every matching subscription and returns how many there were.
    /// Never waits on a subscriber.
    pub fn publish(&self, address: TopicName, body: BusBody) -> usize {
        let envelope = BusEnvelope {
            address,
            body,
            published_at: self.bus.inner.clock.now_ms(),
            seq: self.seq.fetch_add(1, Ordering::Relaxed) + 1,
            publisher: self.id,
        };
        self.bus.dispatch(envelope)
    }
}

/// Receiving end of a subscription. Dropping it unsubscribes.
pub struct Subscription {
    shared: Arc<SubShared>,
    bus: EventBus,
}

impl Subscription {
    pub fn id(&self) -> u64 {
        self.shared.id
    }

    pub fn label(&self) -> &str {
        &self.shared.label
    }

    pub fn try_recv(&self) -> Option<Delivery> {
        self.shared.take(self.bus.inner.clock.as_ref())
    }

    /// Next delivery; `None` once closed and drained.
    pub async fn recv(&self) -> Option<Delivery> {
        loop {
            let notified = self.shared.notify.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            if let Some(d) = self.try_recv() {
                return Some(d);
            }
            if self.shared.closed.load(Ordering::SeqCst) {
                return None;
            }
            notified.await;
        }
    }

    pub fn add_filter(&self, filter: TopicFilter) {
        let mut filters = self.shared.filters.write();
        if !filters.iter().any(|f| f.as_str() == filter.as_str()) {
            filters.push(filter);
        }
    }

    pub fn remove_filter(&self, raw: &str) -> bool {
        let mut filters = self.shared.filters.write();
        let before = filters.len();
        filters.retain(|f| f.as_str() != raw);
        filters.len() != before
    }

    pub fn filters(&self) -> Vec<String> {
        self.shared
            .filters
            .read()
            .iter()
            .map(|f| f.as_str().to_owned())
            .collect()
    }

    pub fn stats(&self) -> SubscriptionStats {
        self.shared.stats()
    }

    pub fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::SeqCst)
    }

    pub fn close(&self) {
        self.bus.unsubscribe(&self.shared);
    }

    pub(crate) fn shared(&self) -> Arc<SubShared> {
        Arc::clone(&self.shared)
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.bus.unsubscribe(&self.shared);
    }
}

/// Closes a subscription held elsewhere, e.g. by a verticle being undeployed.
pub(crate) fn close_shared(bus: &EventBus, shared: &Arc<SubShared>) {
    bus.unsubscribe(shared);
}
