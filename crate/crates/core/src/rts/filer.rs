//! MessageFiler: one JSON line per reading, grouped by device and UTC day.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::Datelike;
use serde_json::json;

use super::bus::{BusBody, SubscriptionPolicy};
use super::verticle::{Verticle, VerticleContext, VerticleFuture};
use crate::clock::to_datetime;
use crate::decoders::NormalizedMessage;
use crate::wire::TopicName;

pub const FILER_ERROR_ADDRESS: &str = "sys/filer/error";
const BATCH: usize = 256;

/// File-system safe directory name for a device id.
pub fn device_dir(device_id: &str) -> String {
    let mut out: String = device_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if out.is_empty() || out.starts_with('.') {
        out.insert(0, '_');
    }
    out
}

/// `<root>/<device>/<YYYY>/<MM>/<DD>.jsonl` for the UTC day of `ts`.
pub fn day_file(root: &Path, device_id: &str, ts: u64) -> PathBuf {
    let day = to_datetime(ts);
    root.join(device_dir(device_id))
        .join(format!("{:04}", day.year()))
        .join(format!("{:02}", day.month()))
        .join(format!("{:02}.jsonl", day.day()))
}

pub fn latest_file(root: &Path, device_id: &str) -> PathBuf {
    root.join(device_dir(device_id)).join("latest.json")
}

#[derive(Debug, Default)]
pub struct FilerStats {
    pub written: AtomicU64,
    pub errors: AtomicU64,
}

/// Synchronous writer; keeps the maximal reading time seen per device.
pub struct FileStore {
    root: PathBuf,
    latest_ts: HashMap<String, u64>,
}

impl FileStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            latest_ts: HashMap::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn append(&mut self, m: &NormalizedMessage) -> std::io::Result<()> {
        let line = m.to_json();
        let path = day_file(&self.root, &m.device_id, m.ts);
        fs::create_dir_all(path.parent().expect("day file has a parent"))?;
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        file.write_all(format!("{line}\n").as_bytes())?;

        let newest = self.latest_ts.get(&m.device_id).copied();
        let newest = match newest {
            Some(ts) => ts,
            None => read_latest_ts(&self.root, &m.device_id).unwrap_or(0),
        };
        if m.ts >= newest {
            let latest = latest_file(&self.root, &m.device_id);
            let tmp = latest.with_extension("json.tmp");
            fs::write(&tmp, &line)?;
            fs::rename(&tmp, &latest)?;
            self.latest_ts.insert(m.device_id.clone(), m.ts);
        } else {
            self.latest_ts.insert(m.device_id.clone(), newest);
        }
        Ok(())
    }
}

fn read_latest_ts(root: &Path, device_id: &str) -> Option<u64> {
    let text = fs::read_to_string(latest_file(root, device_id)).ok()?;
    serde_json::from_str::<NormalizedMessage>(&text).ok().map(|m| m.ts)
}

pub struct MessageFiler {
    root: PathBuf,
    filters: Vec<String>,
    stats: Arc<FilerStats>,
}

impl MessageFiler {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            filters: vec!["feed/#".into()],
            stats: Arc::default(),
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

    pub fn stats(&self) -> Arc<FilerStats> {
        Arc::clone(&self.stats)
    }
}

impl Verticle for MessageFiler {
    fn name(&self) -> &str {
        "messagefiler"
    }

    fn start(self: Box<Self>, ctx: VerticleContext) -> VerticleFuture {
        let policy = match SubscriptionPolicy::new(&self.filters) {
            Ok(p) => p,
            Err(e) => {
                tracing::error!(error = %e, "messagefiler has an invalid filter");
                return Box::pin(async {});
            }
        };
        let sub = ctx.subscribe(policy);
        let publisher = ctx.publisher();
        Box::pin(async move {
            let mut store = Some(FileStore::new(self.root.clone()));
            while let Some(first) = sub.recv().await {
                let mut batch = vec![first];
                while batch.len() < BATCH {
                    match sub.try_recv() {
                        Some(d) => batch.push(d),
                        None => break,
                    }
                }
                let readings: Vec<NormalizedMessage> = batch
                    .iter()
                    .filter_map(|d| d.body.reading().cloned())
                    .collect();
                if readings.is_empty() {
                    continue;
                }
                let mut owned = store.take().expect("store is returned after each batch");
                let (returned, failures) = tokio::task::spawn_blocking(move || {
                    let mut failures = Vec::new();
                    let mut written = 0u64;
                    for m in &readings {
                        match owned.append(m) {
                            Ok(()) => written += 1,
                            Err(e) => failures.push((m.device_id.clone(), e.to_string())),
                        }
                    }
                    (owned, (written, failures))
                })
                .await
                .expect("filer write task panicked");
                store = Some(returned);
                let (written, failures) = failures;
                self.stats.written.fetch_add(written, Ordering::SeqCst);
                for (device_id, error) in failures {
                    self.stats.errors.fetch_add(1, Ordering::SeqCst);
                    tracing::warn!(%device_id, %error, "messagefiler write failed");
                    publisher.publish(
                        TopicName::new(FILER_ERROR_ADDRESS).expect("valid address"),
                        BusBody::Json(json!({ "device_id": device_id, "error": error })),
                    );
                }
            }
        })
    }
}
