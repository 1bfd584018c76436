use std::future::Future;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use tokio_util::sync::CancellationToken;

use super::{Broker, BridgeRule, BrokerError, Ingress, SessionEntry};
use crate::mqtt::{ClientOptions, MqttClient};
use crate::wire::Publish;

const BACKOFF_BASE: Duration = Duration::from_millis(500);
const BACKOFF_CAP: Duration = Duration::from_secs(30);

/// Live state of one bridge link.
#[derive(Debug, Default)]
pub struct BridgeStatus {
    connected: AtomicBool,
    pub connect_attempts: AtomicU64,
    pub received: AtomicU64,
    pub forwarded: AtomicU64,
}

impl BridgeStatus {
    pub fn is_connected(&self) -> bool {
        self.connected.load(Ordering::SeqCst)
    }
}

/// Exponential backoff sequence: 500 ms doubling up to 30 s.
pub(crate) fn backoff_delays() -> impl Iterator<Item = Duration> {
    std::iter::successors(Some(BACKOFF_BASE), |d| Some((*d * 2).min(BACKOFF_CAP)))
}

/// Registers the outbound sink (if any) and returns the bridge's long-running task.
pub(super) fn run_bridge(
    broker: Broker,
    rule: BridgeRule,
    index: usize,
    status: Arc<BridgeStatus>,
    shutdown: CancellationToken,
) -> Result<impl Future<Output = ()>, BrokerError> {
    let link = broker.next_link();
    let sink = if rule.direction.outbound() {
        let entry = Arc::new(SessionEntry::new(
            format!("$bridge/{index}"),
            link,
            shutdown.clone(),
        ));
        entry.add_filter(rule.local_filter()?);
        broker.register(Arc::clone(&entry));
        Some(entry)
    } else {
        None
    };

    Ok(async move {
        let client_id = format!("bridge-{}-{index}", std::process::id());
        let mut delays = backoff_delays();
        loop {
            if shutdown.is_cancelled() {
                break;
            }
            status.connect_attempts.fetch_add(1, Ordering::Relaxed);
            let attempt = async {
                let (client, incoming) =
                    MqttClient::connect(rule.remote.as_str(), ClientOptions::new(&client_id)).await?;
                if rule.direction.inbound() {
                    client.subscribe([rule.filter.as_str()]).await?;
                }
                Ok::<_, crate::mqtt::MqttError>((client, incoming))
            };
            let (client, mut incoming) = match attempt.await {
                Ok(pair) => pair,
                Err(e) => {
                    let delay = delays.next().unwrap_or(BACKOFF_CAP);
                    tracing::warn!(remote = %rule.remote, error = %e, ?delay, "bridge connect failed");
                    tokio::select! {
                        _ = shutdown.cancelled() => break,
                        _ = tokio::time::sleep(delay) => continue,
                    }
                }
            };
            delays = backoff_delays();
            status.connected.store(true, Ordering::SeqCst);
            tracing::info!(remote = %rule.remote, filter = %rule.filter, direction = ?rule.direction, "bridge up");

            loop {
                tokio::select! {
                    _ = shutdown.cancelled() => {
                        client.disconnect().await;
                        status.connected.store(false, Ordering::SeqCst);
                        if let Some(sink) = &sink {
                            broker.unregister(&sink.client_id, sink.link);
                        }
                        return;
                    }
                    inbound = incoming.recv() => {
                        let Some(publish) = inbound else { break };
                        let Some(topic) = rule.to_local(&publish.topic) else { continue };
                        status.received.fetch_add(1, Ordering::Relaxed);
                        broker.ingest(link, Ingress::Bridge, Publish { topic, ..publish });
                    }
                    outbound = async {
                        match &sink {
                            Some(sink) => sink.queue.pop().await,
                            None => std::future::pending().await,
                        }
                    } => {
                        let Some(local) = outbound else { break };
                        let Some(topic) = rule.to_remote(&local.topic) else { continue };
                        let publish = Publish { topic, payload: local.payload.clone(), retain: local.retain };
                        if client.publish_packet(publish).await.is_err() {
                            break;
                        }
                        status.forwarded.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
            status.connected.store(false, Ordering::SeqCst);
            tracing::warn!(remote = %rule.remote, "bridge link lost, reconnecting");
        }
        if let Some(sink) = &sink {
            broker.unregister(&sink.client_id, sink.link);
        }
    })
}
