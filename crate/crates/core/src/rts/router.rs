//! MessageRouter: republishes bus envelopes to remote brokers.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::bus::{BusBody, BusEnvelope, Delivery, SubscriptionPolicy};
use super::verticle::{Verticle, VerticleContext, VerticleFuture};
use crate::broker::backoff_delays;
use crate::mqtt::{ClientOptions, MqttClient};
use crate::queue::Overflow;
use crate::wire::{Publish, TopicFilter, TopicName};

pub const ROUTER_BUFFER: usize = 10_000;

fn default_template() -> String {
    "{address}".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Route {
    pub filter: TopicFilter,
    pub remote: String,
    /// Placeholders: `{address}`, `{device_id}`, `{family}`.
    #[serde(default = "default_template")]
    pub topic_template: String,
}

impl Route {
    pub fn new(filter: &str, remote: impl Into<String>, topic_template: impl Into<String>) -> Result<Self, crate::wire::WireError> {
        Ok(Self {
            filter: TopicFilter::new(filter)?,
            remote: remote.into(),
            topic_template: topic_template.into(),
        })
    }

    pub fn render(&self, envelope: &BusEnvelope) -> Option<TopicName> {
        let (device_id, family) = match &envelope.body {
            BusBody::Reading(m) => (m.device_id.as_str(), m.family.as_str()),
            BusBody::Event(e) => (e.scope.as_str(), e.event_type.as_str()),
            _ => ("_", "_"),
        };
        let topic = self
            .topic_template
            .replace("{address}", envelope.address.as_str())
            .replace("{device_id}", device_id)
            .replace("{family}", family);
        TopicName::new(topic).ok()
    }
}

#[derive(Debug, Default)]
pub struct RouteStats {
    pub forwarded: AtomicU64,
    pub unroutable: AtomicU64,
    pub connects: AtomicU64,
    connected: AtomicBool,
}

impl RouteStats {
    pub fn is_connected(&self) -> bool {
        self.connected.load(Ordering::SeqCst)
    }
}

pub struct MessageRouter {
    routes: Vec<Route>,
    stats: Vec<Arc<RouteStats>>,
}

impl MessageRouter {
    pub fn new(routes: Vec<Route>) -> Self {
        let stats = routes.iter().map(|_| Arc::default()).collect();
        Self { routes, stats }
    }

    pub fn stats(&self) -> Vec<Arc<RouteStats>> {
        self.stats.clone()
    }
}

impl Verticle for MessageRouter {
    fn name(&self) -> &str {
        "messagerouter"
    }

    fn start(self: Box<Self>, ctx: VerticleContext) -> VerticleFuture {
        let subs: Vec<_> = self
            .routes
            .iter()
            .map(|route| {
                ctx.subscribe(
                    SubscriptionPolicy::new([route.filter.as_str()])
                        .expect("route filter is validated")
                        .capacity(ROUTER_BUFFER)
                        .overflow(Overflow::DropOldest),
                )
            })
            .collect();
        Box::pin(async move {
            let mut tasks = Vec::new();
            let routes = self.routes.into_iter().zip(self.stats).zip(subs);
            for (index, ((route, stats), sub)) in routes.enumerate() {
                let cancel = ctx.cancelled().clone();
                tasks.push(tokio::spawn(async move {
                    let client_id = format!("router-{}-{index}", std::process::id());
                    let mut pending: Option<Delivery> = None;
                    let mut delays = backoff_delays();
                    while !cancel.is_cancelled() {
                        stats.connects.fetch_add(1, Ordering::Relaxed);
                        let client = match MqttClient::connect(route.remote.as_str(), ClientOptions::new(&client_id)).await {
                            Ok((client, _)) => client,
                            Err(e) => {
                                let delay = delays.next().unwrap_or_default();
                                tracing::debug!(remote = %route.remote, error = %e, ?delay, "router connect failed");
                                tokio::select! {
                                    _ = cancel.cancelled() => break,
                                    _ = tokio::time::sleep(delay) => continue,
                                }
                            }
                        };
                        delays = backoff_delays();
                        stats.connected.store(true, Ordering::SeqCst);
                        loop {
                            let delivery = match pending.take() {
                                Some(d) => d,
                                None => tokio::select! {
                                    _ = cancel.cancelled() => break,
                                    _ = client.closed() => break,
                                    next = sub.recv() => match next {
                                        Some(d) => d,
                                        None => break,
                                    },
                                },
                            };
                            let Some(topic) = route.render(&delivery) else {
                                stats.unroutable.fetch_add(1, Ordering::Relaxed);
                                continue;
                            };
                            let payload = serde_json::to_vec(&delivery.body).expect("bus body serializes");
                            match client.publish_packet(Publish::new(topic, payload)).await {
                                Ok(()) => {
                                    stats.forwarded.fetch_add(1, Ordering::Relaxed);
                                }
                                Err(_) => {
                                    pending = Some(delivery);
                                    break;
                                }
                            }
                        }
                        stats.connected.store(false, Ordering::SeqCst);
                        if cancel.is_cancelled() || sub.is_closed() {
                            client.disconnect().await;
                            break;
                        }
                    }
                }));
            }
            for t in tasks {
                let _ = t.await;
            }
        })
    }
}
