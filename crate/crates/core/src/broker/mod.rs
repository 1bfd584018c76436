//! QoS 0 publish/subscribe broker with broker-to-broker bridging.
//!
//! Every connection and every bridge is a *link*. A publish is never delivered
//! back over the link it arrived on, which is what keeps bridged topologies free
//! of echo loops.

mod bridge;
mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;

use crate::queue::{BoundedQueue, Overflow, PushOutcome};
use crate::wire::{Publish, Suback, Subscribe, TopicFilter, TopicName, SUBACK_FAILURE, SUBACK_GRANTED_QOS0};

pub use bridge::BridgeStatus;
pub(crate) use bridge::backoff_delays;

/// Per-session outbound queue bound.
pub const SESSION_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid broker config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    In,
    Out,
    Both,
}

impl Direction {
    pub fn inbound(self) -> bool {
        matches!(self, Direction::In | Direction::Both)
    }

    pub fn outbound(self) -> bool {
        matches!(self, Direction::Out | Direction::Both)
    }
}

/// One bridge to a remote broker.
///
/// Inbound traffic matching `filter` on the remote appears locally under
/// `local_prefix/<topic>`; outbound traffic matching `local_prefix/filter` locally is
/// forwarded with the prefix stripped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeRule {
    pub remote: String,
    pub direction: Direction,
    pub filter: TopicFilter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_prefix: Option<String>,
}

impl BridgeRule {
    pub fn inbound(remote: impl Into<String>, filter: &str) -> Result<Self, BrokerError> {
        Self::new(remote, Direction::In, filter, None)
    }

    pub fn new(
        remote: impl Into<String>,
        direction: Direction,
        filter: &str,
        local_prefix: Option<&str>,
    ) -> Result<Self, BrokerError> {
        let rule = Self {
            remote: remote.into(),
            direction,
            filter: TopicFilter::new(filter).map_err(|e| BrokerError::Config(e.to_string()))?,
            local_prefix: local_prefix.map(str::to_owned),
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<(), BrokerError> {
        if let Some(prefix) = &self.local_prefix {
            let trimmed = prefix.trim_end_matches('/');
            if !trimmed.is_empty() {
                TopicName::new(trimmed).map_err(|e| {
                    BrokerError::Config(format!("bridge local_prefix {prefix:?}: {e}"))
                })?;
            }
        }
        Ok(())
    }

    pub fn prefix(&self) -> &str {
        self.local_prefix.as_deref().unwrap_or("")
    }

    /// Local topic for a publish received from the remote.
    pub fn to_local(&self, remote_topic: &TopicName) -> Option<TopicName> {
        remote_topic.with_prefix(self.prefix()).ok()
    }

    /// Remote topic for a local publish, `None` if outside the prefix.
    pub fn to_remote(&self, local_topic: &TopicName) -> Option<TopicName> {
        local_topic.strip_prefix(self.prefix())
    }

    fn local_filter(&self) -> Result<TopicFilter, BrokerError> {
        self.filter
            .with_prefix(self.prefix())
            .map_err(|e| BrokerError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub listen: String,
    #[serde(default)]
    pub bridges: Vec<BridgeRule>,
}

impl BrokerConfig {
    pub fn new(listen: impl Into<String>) -> Self {
        Self {
            listen: listen.into(),
            bridges: Vec::new(),
        }
    }

    pub fn bridge(mut self, rule: BridgeRule) -> Self {
        self.bridges.push(rule);
        self
    }

    pub fn from_json(raw: &str) -> Result<Self, BrokerError> {
        let config: Self =
            serde_json::from_str(raw).map_err(|e| BrokerError::Config(e.to_string()))?;
        for rule in &config.bridges {
            rule.validate()?;
        }
        Ok(config)
    }
}

pub type LinkId = u64;

/// How a publish entered this broker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ingress {
    Client,
    Bridge,
}

/// Observer invoked for every publish entering the broker, before routing.
pub type IngressHook = Arc<dyn Fn(&Publish, Ingress) + Send + Sync>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BrokerStats {
    pub msgs_in: u64,
    pub msgs_out: u64,
    pub drops: u64,
    pub live_sessions: usize,
}

#[derive(Default)]
struct Counters {
    msgs_in: AtomicU64,
    msgs_out: AtomicU64,
    drops: AtomicU64,
    live_sessions: AtomicUsize,
}

pub(crate) type Outbound = Arc<Publish>;

/// Routing state of one subscriber: a client session or a bridge's outbound sink.
pub(crate) struct SessionEntry {
    pub client_id: String,
    pub link: LinkId,
    filters: RwLock<Vec<TopicFilter>>,
    pub queue: Arc<BoundedQueue<Outbound>>,
    pub kill: CancellationToken,
}

impl SessionEntry {
    fn new(client_id: String, link: LinkId, kill: CancellationToken) -> Self {
        Self {
            client_id,
            link,
            filters: RwLock::new(Vec::new()),
            queue: Arc::new(BoundedQueue::new(SESSION_QUEUE_CAPACITY, Overflow::DropOldest)),
            kill,
        }
    }

    /// Adds a filter unless an identical filter string is already held.
    pub fn add_filter(&self, filter: TopicFilter) {
        let mut filters = self.filters.write();
        if !filters.iter().any(|f| f.as_str() == filter.as_str()) {
            filters.push(filter);
        }
    }

    pub fn remove_filter(&self, raw: &str) {
        self.filters.write().retain(|f| f.as_str() != raw);
    }

    pub fn matches(&self, topic: &TopicName) -> bool {
        self.filters.read().iter().any(|f| f.matches(topic))
    }

    #[cfg(test)]
    fn filters(&self) -> Vec<TopicFilter> {
        self.filters.read().clone()
    }
}

/// Shared routing core; cheap to clone.
#[derive(Clone)]
pub struct Broker {
    core: Arc<Core>,
}

struct Core {
    sessions: RwLock<HashMap<String, Arc<SessionEntry>>>,
    next_link: AtomicU64,
    counters: Counters,
    hook: RwLock<Option<IngressHook>>,
}

impl Default for Broker {
    fn default() -> Self {
        Self::new()
    }
}

impl Broker {
    pub fn new() -> Self {
        Self {
            core: Arc::new(Core {
                sessions: RwLock::new(HashMap::new()),
                next_link: AtomicU64::new(1),
                counters: Counters::default(),
                hook: RwLock::new(None),
            }),
        }
    }

    pub fn set_ingress_hook(&self, hook: Option<IngressHook>) {
        *self.core.hook.write() = hook;
    }

    pub fn stats(&self) -> BrokerStats {
        let c = &self.core.counters;
        BrokerStats {
            msgs_in: c.msgs_in.load(Ordering::Relaxed),
            msgs_out: c.msgs_out.load(Ordering::Relaxed),
            drops: c.drops.load(Ordering::Relaxed),
            live_sessions: c.live_sessions.load(Ordering::Relaxed),
        }
    }

    pub(crate) fn next_link(&self) -> LinkId {
        self.core.next_link.fetch_add(1, Ordering::Relaxed)
    }

    /// Registers a session, superseding (and closing) any live session with the same id.
    pub(crate) fn register(&self, entry: Arc<SessionEntry>) {
        let previous = self
            .core
            .sessions
            .write()
            .insert(entry.client_id.clone(), entry);
        match previous {
            Some(old) => {
                tracing::info!(client_id = %old.client_id, "session superseded by newer connection");
                old.kill.cancel();
                old.queue.close();
            }
            None => {
                self.core.counters.live_sessions.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Removes the session only if it still belongs to `link`.
    pub(crate) fn unregister(&self, client_id: &str, link: LinkId) {
        let mut sessions = self.core.sessions.write();
        if sessions.get(client_id).is_some_and(|s| s.link == link) {
            if let Some(entry) = sessions.remove(client_id) {
                entry.queue.close();
            }
            self.core.counters.live_sessions.fetch_sub(1, Ordering::Relaxed);
        }
    }

    /// Entry point for publishes from clients and bridges.
    pub fn ingest(&self, origin: LinkId, ingress: Ingress, publish: Publish) -> usize {
        self.core.counters.msgs_in.fetch_add(1, Ordering::Relaxed);
        if let Some(hook) = self.core.hook.read().as_ref() {
            hook(&publish, ingress);
        }
        self.route_publish(origin, Arc::new(publish))
    }

    /// Fans a publish out to every session with at least one matching filter, once per
    /// session, skipping the origin link. Returns the number of sessions targeted.
    pub fn route_publish(&self, origin: LinkId, publish: Arc<Publish>) -> usize {
        let mut targeted = 0;
        let mut drops = 0;
        for session in self.core.sessions.read().values() {
            if session.link == origin || !session.matches(&publish.topic) {
                continue;
            }
            match session.queue.push(Arc::clone(&publish)) {
                PushOutcome::Queued => targeted += 1,
                PushOutcome::EvictedOldest => {
                    targeted += 1;
                    drops += 1;
                }
                PushOutcome::Rejected | PushOutcome::Closed => drops += 1,
            }
        }
        let c = &self.core.counters;
        c.msgs_out.fetch_add(targeted as u64, Ordering::Relaxed);
        if drops > 0 {
            c.drops.fetch_add(drops, Ordering::Relaxed);
        }
        targeted
    }

    /// Applies a SUBSCRIBE: valid filters are added and granted QoS 0, invalid ones get 0x80.
    pub(crate) fn handle_subscribe(&self, session: &SessionEntry, sub: &Subscribe) -> Suback {
        let granted = sub
            .filters
            .iter()
            .map(|raw| match TopicFilter::new(raw.as_str()) {
                Ok(filter) => {
                    session.add_filter(filter);
                    SUBACK_GRANTED_QOS0
                }
                Err(e) => {
                    tracing::debug!(client_id = %session.client_id, error = %e, "rejected filter");
                    SUBACK_FAILURE
                }
            })
            .collect();
        Suback {
            packet_id: sub.packet_id,
            granted,
        }
    }

    /// Binds the listener, starts configured bridges and begins accepting clients.
    pub async fn serve(&self, config: &BrokerConfig) -> Result<BrokerHandle, BrokerError> {
        for rule in &config.bridges {
            rule.validate()?;
        }
        let listener = TcpListener::bind(&config.listen)
            .await
            .map_err(|source| BrokerError::Bind {
                addr: config.listen.clone(),
                source,
            })?;
        let local_addr = listener.local_addr()?;
        let shutdown = CancellationToken::new();

        let mut bridges = Vec::with_capacity(config.bridges.len());
        let mut tasks = Vec::new();
        for (index, rule) in config.bridges.iter().enumerate() {
            let status = Arc::new(BridgeStatus::default());
            tasks.push(tokio::spawn(bridge::run_bridge(
                self.clone(),
                rule.clone(),
                index,
                Arc::clone(&status),
                shutdown.child_token(),
            )?));
            bridges.push(status);
        }

        tasks.push(tokio::spawn(accept_loop(
            self.clone(),
            listener,
            shutdown.clone(),
        )));
        tracing::info!(%local_addr, bridges = bridges.len(), "broker listening");
        Ok(BrokerHandle {
            broker: self.clone(),
            local_addr,
            shutdown,
            bridges,
            tasks,
        })
    }
}

async fn accept_loop(broker: Broker, listener: TcpListener, shutdown: CancellationToken) {
    loop {
        let accepted = tokio::select! {
            _ = shutdown.cancelled() => return,
            accepted = listener.accept() => accepted,
        };
        match accepted {
            Ok((stream, peer)) => {
                tokio::spawn(session::run_connection(
                    broker.clone(),
                    stream,
                    peer,
                    shutdown.child_token(),
                ));
            }
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                tokio::time::sleep(Duration::from_millis(50)).await;
            }
        }
    }
}

/// A running broker. Dropping the handle does not stop it; call [`BrokerHandle::stop`].
pub struct BrokerHandle {
    broker: Broker,
    local_addr: SocketAddr,
    shutdown: CancellationToken,
    bridges: Vec<Arc<BridgeStatus>>,
    tasks: Vec<JoinHandle<()>>,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn stats(&self) -> BrokerStats {
        self.broker.stats()
    }

    pub fn bridges(&self) -> &[Arc<BridgeStatus>] {
        &self.bridges
    }

    /// Waits until every bridge reports an established remote link.
    pub async fn wait_bridges_connected(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            if self.bridges.iter().all(|b| b.is_connected()) {
                return true;
            }
            if tokio::time::Instant::now() >= deadline {
                return false;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    }

    pub async fn stop(self) {
        self.shutdown.cancel();
        for task in self.tasks {
            let _ = tokio::time::timeout(Duration::from_secs(5), task).await;
        }
    }
}
