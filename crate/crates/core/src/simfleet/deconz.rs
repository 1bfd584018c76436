//! deCONZ stand-in: a websocket server pushing sensor events, and the
//! translator that republishes them on the zigbee broker.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use tokio::net::{TcpListener, ToSocketAddrs};
use tokio::sync::broadcast;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;
use tokio_util::sync::CancellationToken;

use super::PayloadTap;
use crate::broker::backoff_delays;
use crate::mqtt::{ClientOptions, MqttClient};
use crate::rts::address_level;
use crate::wire::{Publish, TopicName};

const EVENT_BACKLOG: usize = 8192;

/// Device-side handle for pushing events into the gateway.
#[derive(Clone)]
pub struct DeconzSender(broadcast::Sender<String>);

impl DeconzSender {
    /// False when no websocket client is listening.
    pub fn send(&self, event: String) -> bool {
        self.0.send(event).is_ok()
    }
}

pub struct DeconzGateway {
    addr: SocketAddr,
    tx: broadcast::Sender<String>,
    cancel: CancellationToken,
    task: JoinHandle<()>,
}

impl DeconzGateway {
    pub async fn bind(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let (tx, _) = broadcast::channel(EVENT_BACKLOG);
        let cancel = CancellationToken::new();
        let task = tokio::spawn(accept_loop(listener, tx.clone(), cancel.clone()));
        Ok(Self { addr, tx, cancel, task })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    pub fn sender(&self) -> DeconzSender {
        DeconzSender(self.tx.clone())
    }

    pub fn clients(&self) -> usize {
        self.tx.receiver_count()
    }

    pub async fn stop(self) {
        self.cancel.cancel();
        let _ = self.task.await;
    }
}

async fn accept_loop(listener: TcpListener, tx: broadcast::Sender<String>, cancel: CancellationToken) {
    loop {
        let stream = tokio::select! {
            _ = cancel.cancelled() => return,
            accepted = listener.accept() => match accepted {
                Ok((stream, _)) => stream,
                Err(e) => {
                    tracing::warn!(error = %e, "deconz accept failed");
                    continue;
                }
            },
        };
        let _ = stream.set_nodelay(true);
        let tx = tx.clone();
        let cancel = cancel.clone();
        tokio::spawn(async move {
            let Ok(mut ws) = tokio_tungstenite::accept_async(stream).await else { return };
            let mut rx = tx.subscribe();
            loop {
                tokio::select! {
                    _ = cancel.cancelled() => break,
                    event = rx.recv() => match event {
                        Ok(text) => {
                            if ws.send(Message::text(text)).await.is_err() {
                                break;
                            }
                        }
                        Err(broadcast::error::RecvError::Lagged(n)) => {
                            tracing::warn!(skipped = n, "deconz client lagging");
                        }
                        Err(broadcast::error::RecvError::Closed) => break,
                    },
                    incoming = ws.next() => match incoming {
                        Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                        Some(Ok(_)) => {}
                    },
                }
            }
            let _ = ws.close(None).await;
        });
    }
}

#[derive(Debug, Default)]
pub struct TranslatorStats {
    pub forwarded: AtomicU64,
    pub malformed: AtomicU64,
    connected: AtomicBool,
}

impl TranslatorStats {
    pub fn is_connected(&self) -> bool {
        self.connected.load(Ordering::SeqCst)
    }
}

/// Subscribes to the gateway websocket and republishes `changed` sensor
/// events on `zigbee/<id>/state`.
pub struct ZigbeeTranslator {
    ws_url: String,
    broker: String,
    tap: Option<PayloadTap>,
}

pub struct TranslatorHandle {
    stats: Arc<TranslatorStats>,
    cancel: CancellationToken,
    task: JoinHandle<()>,
}

impl TranslatorHandle {
    pub fn stats(&self) -> Arc<TranslatorStats> {
        Arc::clone(&self.stats)
    }

    pub async fn wait_connected(&self, timeout: Duration) -> bool {
        let deadline = tokio::time::Instant::now() + timeout;
        while tokio::time::Instant::now() < deadline {
            if self.stats.is_connected() {
                return true;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        self.stats.is_connected()
    }

    pub async fn stop(self) {
        self.cancel.cancel();
        let _ = self.task.await;
    }
}

fn event_topic(event: &Value) -> Option<TopicName> {
    if event.get("e").and_then(Value::as_str) != Some("changed") || event.get("state").is_none() {
        return None;
    }
    let id = match event.get("id")? {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => return None,
    };
    TopicName::new(format!("zigbee/{}/state", address_level(&id))).ok()
}

impl ZigbeeTranslator {
    pub fn new(ws_url: impl Into<String>, broker: impl Into<String>) -> Self {
        Self {
            ws_url: ws_url.into(),
            broker: broker.into(),
            tap: None,
        }
    }

    /// Called with each translated message just before it is published.
    pub fn tap(mut self, tap: PayloadTap) -> Self {
        self.tap = Some(tap);
        self
    }

    pub fn spawn(self) -> TranslatorHandle {
        let stats = Arc::new(TranslatorStats::default());
        let cancel = CancellationToken::new();
        let task = tokio::spawn(self.run(Arc::clone(&stats), cancel.clone()));
        TranslatorHandle { stats, cancel, task }
    }

    async fn run(self, stats: Arc<TranslatorStats>, cancel: CancellationToken) {
        let client_id = format!("deconz-translator-{}", std::process::id());
        let mut delays = backoff_delays();
        while !cancel.is_cancelled() {
            let attempt = async {
                let (client, _) = MqttClient::connect(self.broker.as_str(), ClientOptions::new(&client_id)).await?;
                let (ws, _) = tokio_tungstenite::connect_async(self.ws_url.as_str())
                    .await
                    .map_err(|e| crate::mqtt::MqttError::Io(std::io::Error::other(e)))?;
                Ok::<_, crate::mqtt::MqttError>((client, ws))
            };
            let (client, mut ws) = match attempt.await {
                Ok(pair) => pair,
                Err(e) => {
                    let delay = delays.next().unwrap_or_default();
                    tracing::debug!(error = %e, ?delay, "translator connect failed");
                    tokio::select! {
                        _ = cancel.cancelled() => break,
                        _ = tokio::time::sleep(delay) => continue,
                    }
                }
            };
            delays = backoff_delays();
            stats.connected.store(true, Ordering::SeqCst);
            loop {
                let message = tokio::select! {
                    _ = cancel.cancelled() => break,
                    _ = client.closed() => break,
                    m = ws.next() => m,
                };
                let text = match message {
                    Some(Ok(Message::Text(text))) => text,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let Some(topic) = serde_json::from_str::<Value>(text.as_str()).ok().as_ref().and_then(event_topic) else {
                    stats.malformed.fetch_add(1, Ordering::Relaxed);
                    continue;
                };
                if let Some(tap) = &self.tap {
                    tap(&topic, text.as_bytes());
                }
                if client
                    .publish_packet(Publish::new(topic, text.as_bytes().to_vec()))
                    .await
                    .is_err()
                {
                    break;
                }
                stats.forwarded.fetch_add(1, Ordering::Relaxed);
            }
            stats.connected.store(false, Ordering::SeqCst);
            client.disconnect().await;
            let _ = ws.close(None).await;
        }
    }
}
