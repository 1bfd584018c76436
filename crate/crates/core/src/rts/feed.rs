//! FeedHandler: broker messages in, decoded envelopes out on `feed/...`.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use super::bus::{BusBody, Publisher};
use super::verticle::{Verticle, VerticleContext, VerticleFuture};
use super::{address, DEAD_LETTER_ADDRESS};
use crate::broker::backoff_delays;
use crate::clock::now_ms;
use crate::decoders::{DecoderRegistry, NormalizedMessage, RawSensorMessage};
use crate::mqtt::{ClientOptions, MqttClient};
use crate::wire::TopicName;

/// Called with each decoded message just before it is put on the bus.
pub type FeedTap = Arc<dyn Fn(&NormalizedMessage) + Send + Sync>;

#[derive(Debug, Default)]
pub struct FeedStats {
    pub received: AtomicU64,
    pub published: AtomicU64,
    pub dead_letters: AtomicU64,
    connected: AtomicBool,
}

impl FeedStats {
    pub fn is_connected(&self) -> bool {
        self.connected.load(Ordering::SeqCst)
    }

    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.received.load(Ordering::SeqCst),
            self.published.load(Ordering::SeqCst),
            self.dead_letters.load(Ordering::SeqCst),
        )
    }
}

pub fn feed_address(family: &str, device_id: &str) -> TopicName {
    address(&["feed", family, device_id])
}

/// Decodes one raw message and publishes the outcome.
pub fn feed_one(
    registry: &DecoderRegistry,
    publisher: &Publisher,
    stats: &FeedStats,
    tap: Option<&FeedTap>,
    raw: &RawSensorMessage,
) {
    stats.received.fetch_add(1, Ordering::SeqCst);
    match registry.process(raw) {
        Ok(normalized) => {
            if let Some(tap) = tap {
                tap(&normalized);
            }
            let addr = feed_address(&normalized.family, &normalized.device_id);
            publisher.publish(addr, BusBody::Reading(normalized));
            stats.published.fetch_add(1, Ordering::SeqCst);
        }
        Err(dead) => {
            tracing::debug!(topic = %dead.topic, reason = %dead.reason, "dead letter");
            publisher.publish(
                TopicName::new(DEAD_LETTER_ADDRESS).expect("valid address"),
                BusBody::DeadLetter(dead),
            );
            stats.dead_letters.fetch_add(1, Ordering::SeqCst);
        }
    }
}

pub struct FeedHandler {
    broker: String,
    filters: Vec<String>,
    registry: DecoderRegistry,
    stats: Arc<FeedStats>,
    tap: Option<FeedTap>,
}

impl FeedHandler {
    pub fn new(broker: impl Into<String>, registry: DecoderRegistry) -> Self {
        Self {
            broker: broker.into(),
            filters: vec!["#".into()],
            registry,
            stats: Arc::default(),
            tap: None,
        }
    }

    pub fn filters<I, S>(mut self, filters: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.filters = filters.into_iter().map(Into::into).collect();
        self
    }

    pub fn tap(mut self, tap: FeedTap) -> Self {
        self.tap = Some(tap);
        self
    }

    pub fn stats(&self) -> Arc<FeedStats> {
        Arc::clone(&self.stats)
    }
}

impl Verticle for FeedHandler {
    fn name(&self) -> &str {
        "feedhandler"
    }

    fn start(self: Box<Self>, ctx: VerticleContext) -> VerticleFuture {
        Box::pin(async move {
            let publisher = ctx.publisher();
            let cancel = ctx.cancelled().clone();
            let client_id = format!("feedhandler-{}", publisher.id());
            let mut delays = backoff_delays();
            while !cancel.is_cancelled() {
                let attempt = async {
                    let (client, incoming) =
                        MqttClient::connect(self.broker.as_str(), ClientOptions::new(&client_id))
                            .await?;
                    client.subscribe(self.filters.iter().map(String::as_str)).await?;
                    Ok::<_, crate::mqtt::MqttError>((client, incoming))
                };
                let (client, mut incoming) = match attempt.await {
                    Ok(pair) => pair,
                    Err(e) => {
                        let delay = delays.next().unwrap_or_default();
                        tracing::warn!(broker = %self.broker, error = %e, ?delay, "feedhandler connect failed");
                        tokio::select! {
                            _ = cancel.cancelled() => break,
                            _ = tokio::time::sleep(delay) => continue,
                        }
                    }
                };
                delays = backoff_delays();
                self.stats.connected.store(true, Ordering::SeqCst);
                loop {
                    tokio::select! {
                        _ = cancel.cancelled() => {
                            client.disconnect().await;
                            break;
                        }
                        next = incoming.recv() => {
                            let Some(publish) = next else {
                                tracing::warn!(broker = %self.broker, "feedhandler lost broker, reconnecting");
                                break;
                            };
                            let raw = RawSensorMessage::new(publish.topic, publish.payload, now_ms());
                            feed_one(&self.registry, &publisher, &self.stats, self.tap.as_ref(), &raw);
                        }
                    }
                }
                self.stats.connected.store(false, Ordering::SeqCst);
            }
        })
    }
}
