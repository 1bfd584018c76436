//! DataMonitor: newline-delimited JSON push protocol for outside clients.
//!
//! Requests: `{"method":"subscribe"|"unsubscribe","filters":[...]}`.
//! Each request gets an acknowledgement line; matching envelopes are pushed as
//! `{"address":...,"published_at":...,"body":...}`.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::OwnedReadHalf;
use tokio::net::{TcpListener, TcpStream, ToSocketAddrs};
use tokio::sync::mpsc;

use super::bus::{BusBody, Delivery, Subscription, SubscriptionPolicy};
use super::verticle::{Verticle, VerticleContext, VerticleFuture};
use crate::wire::TopicFilter;

/// Pushes already queued are coalesced into one write up to this many bytes.
const WRITE_BATCH: usize = 64 * 1024;

#[derive(Debug, Deserialize)]
struct Request {
    method: String,
    #[serde(default)]
    filters: Vec<String>,
}

#[derive(Serialize)]
struct Push<'a> {
    address: &'a str,
    published_at: u64,
    body: &'a BusBody,
}

#[derive(Debug, Default)]
pub struct MonitorStats {
    pub clients: AtomicU64,
    pub lines_sent: AtomicU64,
    pub bad_requests: AtomicU64,
}

pub struct DataMonitor {
    listener: TcpListener,
    policy: SubscriptionPolicy,
    stats: Arc<MonitorStats>,
}

impl DataMonitor {
    pub async fn bind(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr).await?,
            policy: SubscriptionPolicy::empty(),
            stats: Arc::default(),
        })
    }

    /// Queue settings applied to every client's subscription.
    pub fn client_policy(mut self, policy: SubscriptionPolicy) -> Self {
        self.policy = SubscriptionPolicy {
            filters: Vec::new(),
            ..policy
        };
        self
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn stats(&self) -> Arc<MonitorStats> {
        Arc::clone(&self.stats)
    }
}

impl Verticle for DataMonitor {
    fn name(&self) -> &str {
        "datamonitor"
    }

    fn start(self: Box<Self>, ctx: VerticleContext) -> VerticleFuture {
        Box::pin(async move {
            let cancel = ctx.cancelled().clone();
            loop {
                let (stream, peer) = tokio::select! {
                    _ = cancel.cancelled() => break,
                    accepted = self.listener.accept() => match accepted {
                        Ok(pair) => pair,
                        Err(e) => {
                            tracing::warn!(error = %e, "datamonitor accept failed");
                            continue;
                        }
                    },
                };
                self.stats.clients.fetch_add(1, Ordering::Relaxed);
                let sub = ctx.subscribe(self.policy.clone());
                tokio::spawn(serve_client(stream, peer, sub, Arc::clone(&self.stats), cancel.clone()));
            }
        })
    }
}

async fn serve_client(
    stream: TcpStream,
    peer: SocketAddr,
    sub: Subscription,
    stats: Arc<MonitorStats>,
    cancel: tokio_util::sync::CancellationToken,
) {
    let _ = stream.set_nodelay(true);
    let (read_half, mut write_half) = stream.into_split();
    let (ctrl_tx, mut ctrl_rx) = mpsc::unbounded_channel::<String>();
    let sub = Arc::new(sub);

    let reader = {
        let sub = Arc::clone(&sub);
        let stats = Arc::clone(&stats);
        tokio::spawn(async move {
            let mut lines = BufReader::new(read_half).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                if line.trim().is_empty() {
                    continue;
                }
                let reply = handle_request(&sub, &line);
                if reply.get("error").is_some() {
                    stats.bad_requests.fetch_add(1, Ordering::Relaxed);
                }
                if ctrl_tx.send(reply.to_string()).is_err() {
                    break;
                }
            }
        })
    };

    let mut buf = Vec::with_capacity(WRITE_BATCH);
    loop {
        buf.clear();
        tokio::select! {
            biased;
            _ = cancel.cancelled() => break,
            ctrl = ctrl_rx.recv() => match ctrl {
                Some(line) => buf.extend_from_slice(line.as_bytes()),
                None => break,
            },
            next = sub.recv() => match next {
                Some(d) => write_push(&d, &mut buf),
                None => break,
            },
        }
        buf.push(b'\n');
        let mut lines = 1;
        while buf.len() < WRITE_BATCH {
            let Some(d) = sub.try_recv() else { break };
            write_push(&d, &mut buf);
            buf.push(b'\n');
            lines += 1;
        }
        if write_half.write_all(&buf).await.is_err() {
            break;
        }
        stats.lines_sent.fetch_add(lines, Ordering::Relaxed);
    }
    tracing::debug!(%peer, "datamonitor client gone");
    reader.abort();
    sub.close();
}

fn write_push(d: &Delivery, buf: &mut Vec<u8>) {
    let push = Push {
        address: d.address.as_str(),
        published_at: d.published_at,
        body: &d.body,
    };
    serde_json::to_writer(&mut *buf, &push).expect("push line serializes");
}

fn handle_request(sub: &Subscription, line: &str) -> Value {
    let request: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return json!({ "error": format!("malformed request: {e}") }),
    };
    match request.method.as_str() {
        "subscribe" => {
            let parsed: Result<Vec<TopicFilter>, _> =
                request.filters.iter().map(TopicFilter::new).collect();
            match parsed {
                Ok(filters) => {
                    for f in filters {
                        sub.add_filter(f);
                    }
                    json!({ "result": "ok", "method": "subscribe", "filters": sub.filters() })
                }
                Err(e) => json!({ "error": e.to_string() }),
            }
        }
        "unsubscribe" => {
            for f in &request.filters {
                sub.remove_filter(f);
            }
            json!({ "result": "ok", "method": "unsubscribe", "filters": sub.filters() })
        }
        other => json!({ "error": format!("unknown method: {other}") }),
    }
}

/// One pushed envelope as seen by a client.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct MonitorLine {
    pub address: String,
    pub published_at: u64,
    pub body: Value,
}

#[derive(Debug, thiserror::Error)]
pub enum MonitorClientError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("server closed the connection")]
    Closed,
    #[error("server rejected request: {0}")]
    Rejected(String),
    #[error("unparseable line from server: {0}")]
    Protocol(String),
}

/// Minimal client for the DataMonitor protocol.
pub struct MonitorClient {
    lines: tokio::io::Lines<BufReader<OwnedReadHalf>>,
    write: tokio::net::tcp::OwnedWriteHalf,
    backlog: VecDeque<MonitorLine>,
}

impl MonitorClient {
    pub async fn connect(addr: impl ToSocketAddrs) -> Result<Self, MonitorClientError> {
        let stream = TcpStream::connect(addr).await?;
        stream.set_nodelay(true)?;
        let (read, write) = stream.into_split();
        Ok(Self {
            lines: BufReader::new(read).lines(),
            write,
            backlog: VecDeque::new(),
        })
    }

    pub async fn send_raw(&mut self, line: &str) -> Result<(), MonitorClientError> {
        self.write.write_all(format!("{line}\n").as_bytes()).await?;
        Ok(())
    }

    async fn request(&mut self, method: &str, filters: &[&str]) -> Result<Value, MonitorClientError> {
        let line = json!({ "method": method, "filters": filters }).to_string();
        self.send_raw(&line).await?;
        self.next_reply().await
    }

    /// Next acknowledgement or error line, buffering pushes that arrive first.
    pub async fn next_reply(&mut self) -> Result<Value, MonitorClientError> {
        loop {
            let line = self.lines.next_line().await?.ok_or(MonitorClientError::Closed)?;
            let value: Value = serde_json::from_str(&line)
                .map_err(|_| MonitorClientError::Protocol(line.clone()))?;
            if value.get("address").is_some() {
                let push = serde_json::from_value(value)
                    .map_err(|_| MonitorClientError::Protocol(line.clone()))?;
                self.backlog.push_back(push);
                continue;
            }
            return Ok(value);
        }
    }

    pub async fn subscribe(&mut self, filters: &[&str]) -> Result<(), MonitorClientError> {
        let reply = self.request("subscribe", filters).await?;
        match reply.get("error") {
            Some(e) => Err(MonitorClientError::Rejected(e.to_string())),
            None => Ok(()),
        }
    }

    pub async fn unsubscribe(&mut self, filters: &[&str]) -> Result<(), MonitorClientError> {
        self.request("unsubscribe", filters).await.map(|_| ())
    }

    /// Next pushed envelope; `None` when the server closes.
    pub async fn recv(&mut self) -> Result<Option<MonitorLine>, MonitorClientError> {
        if let Some(line) = self.backlog.pop_front() {
            return Ok(Some(line));
        }
        loop {
            let Some(line) = self.lines.next_line().await? else {
                return Ok(None);
            };
            if let Ok(push) = serde_json::from_str::<MonitorLine>(&line) {
                return Ok(Some(push));
            }
            // acks and errors carry no address
            match serde_json::from_str::<Value>(&line) {
                Ok(v) if v.get("address").is_none() => continue,
                _ => return Err(MonitorClientError::Protocol(line)),
            }
        }
    }
}
