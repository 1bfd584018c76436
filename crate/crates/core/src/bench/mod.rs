//! Latency harness: joins timestamps taken at four points of the data path by
//! message key, then summarizes the delays from each reading's generation time.

mod experiment;

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::now_us;
use crate::decoders::{DecoderRegistry, RawSensorMessage};
use crate::wire::TopicName;

pub use experiment::{run_experiment, run_sweep, summarize, ExperimentConfig, ExperimentResult, INCOMPLETE_WARN};

const SHARDS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TapPoint {
    Gateway,
    Broker,
    EventBus,
    Client,
}

impl TapPoint {
    pub const ALL: [TapPoint; 4] = [TapPoint::Gateway, TapPoint::Broker, TapPoint::EventBus, TapPoint::Client];

    pub fn label(self) -> &'static str {
        match self {
            TapPoint::Gateway => "gateway",
            TapPoint::Broker => "broker",
            TapPoint::EventBus => "eventbus",
            TapPoint::Client => "client",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MsgKey {
    pub device_id: String,
    /// Generation time, epoch milliseconds.
    pub sim_t0: u64,
}

impl MsgKey {
    pub fn new(device_id: impl Into<String>, sim_t0: u64) -> Self {
        Self {
            device_id: device_id.into(),
            sim_t0,
        }
    }
}

/// Observation times in epoch microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapRecord {
    pub key: MsgKey,
    pub taps: [Option<i64>; 4],
}

impl TapRecord {
    pub fn at(&self, point: TapPoint) -> Option<i64> {
        self.taps[point.index()]
    }

    pub fn is_complete(&self) -> bool {
        self.taps.iter().all(Option::is_some)
    }

    /// `t_gateway <= t_broker <= t_eventbus <= t_client`; only meaningful when complete.
    pub fn is_ordered(&self) -> bool {
        self.taps.windows(2).all(|w| match (w[0], w[1]) {
            (Some(a), Some(b)) => a <= b,
            _ => false,
        })
    }

    /// Milliseconds from generation to `point`.
    pub fn delta_ms(&self, point: TapPoint) -> Option<f64> {
        self.at(point)
            .map(|t| (t - self.key.sim_t0 as i64 * 1000) as f64 / 1000.0)
    }

    /// Milliseconds between consecutive tap points, gateway first.
    pub fn hop_ms(&self) -> Option<[f64; 3]> {
        let t: Vec<i64> = self.taps.iter().copied().collect::<Option<_>>()?;
        Some([0, 1, 2].map(|i| (t[i + 1] - t[i]) as f64 / 1000.0))
    }
}

/// Joins taps by key. Sharded so concurrent tap sites rarely contend.
pub struct TapRecorder {
    shards: Vec<Mutex<HashMap<MsgKey, TapRecord>>>,
    duplicates: AtomicU64,
}

impl Default for TapRecorder {
    fn default() -> Self {
        Self::new()
    }
}

impl TapRecorder {
    pub fn new() -> Self {
        Self {
            shards: (0..SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
            duplicates: AtomicU64::new(0),
        }
    }

    fn shard(&self, key: &MsgKey) -> &Mutex<HashMap<MsgKey, TapRecord>> {
        let mut h = DefaultHasher::new();
        key.hash(&mut h);
        &self.shards[h.finish() as usize % SHARDS]
    }

    /// Records `t_us` for `point`; the first observation wins.
    pub fn tap(&self, point: TapPoint, key: MsgKey, t_us: i64) {
        let mut shard = self.shard(&key).lock();
        let record = shard.entry(key).or_insert_with_key(|k| TapRecord {
            key: k.clone(),
            taps: [None; 4],
        });
        let slot = &mut record.taps[point.index()];
        if slot.is_some() {
            self.duplicates.fetch_add(1, Ordering::Relaxed);
        } else {
            *slot = Some(t_us);
        }
    }

    pub fn tap_now(&self, point: TapPoint, key: MsgKey) {
        self.tap(point, key, now_us());
    }

    pub fn duplicates(&self) -> u64 {
        self.duplicates.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.shards.iter().map(|s| s.lock().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records, sorted by key.
    pub fn records(&self) -> Vec<TapRecord> {
        let mut out: Vec<TapRecord> = self
            .shards
            .iter()
            .flat_map(|s| s.lock().values().cloned().collect::<Vec<_>>())
            .collect();
        out.sort_by(|a, b| a.key.cmp(&b.key));
        out
    }
}

/// Message key of a raw publish, found by decoding it.
pub fn key_of(registry: &DecoderRegistry, topic: &TopicName, payload: &[u8]) -> Option<MsgKey> {
    let raw = RawSensorMessage::new(topic.clone(), payload.to_vec(), 0);
    let m = registry.process(&raw).ok()?;
    Some(MsgKey::new(m.device_id, m.sim_t0?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("no samples")]
pub struct NoData;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn nearest_rank(sorted: &[f64], p: usize) -> f64 {
    let rank = (sorted.len() * p).div_ceil(100);
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Mean, population standard deviation and nearest-rank percentiles.
pub fn stats(deltas: &[f64]) -> Result<LatencyStats, NoData> {
    if deltas.is_empty() {
        return Err(NoData);
    }
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        count: deltas.len(),
        mean_ms: mean,
        stddev_ms: var.sqrt(),
        min_ms: sorted[0],
        max_ms: sorted[sorted.len() - 1],
        p50_ms: nearest_rank(&sorted, 50),
        p95_ms: nearest_rank(&sorted, 95),
        p99_ms: nearest_rank(&sorted, 99),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PointRow {
    pub point: TapPoint,
    pub stats: LatencyStats,
}

/// Per-tap statistics over complete records.
pub fn table2(records: &[TapRecord]) -> Vec<PointRow> {
    TapPoint::ALL
        .iter()
        .filter_map(|&point| {
            let deltas: Vec<f64> = records
                .iter()
                .filter(|r| r.is_complete())
                .filter_map(|r| r.delta_ms(point))
                .collect();
            stats(&deltas).ok().map(|stats| PointRow { point, stats })
        })
        .collect()
}

/// End-to-end statistics per category; `category` maps a device id to its category.
pub fn by_category(records: &[TapRecord], category: impl Fn(&str) -> Option<String>) -> BTreeMap<String, LatencyStats> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_complete()) {
        if let (Some(c), Some(d)) = (category(&r.key.device_id), r.delta_ms(TapPoint::Client)) {
            groups.entry(c).or_default().push(d);
        }
    }
    groups
        .into_iter()
        .filter_map(|(c, d)| stats(&d).ok().map(|s| (c, s)))
        .collect()
}

pub fn end_to_end(records: &[TapRecord]) -> Result<LatencyStats, NoData> {
    let deltas: Vec<f64> = records
        .iter()
        .filter(|r| r.is_complete())
        .filter_map(|r| r.delta_ms(TapPoint::Client))
        .collect();
    stats(&deltas)
}

fn csv_err(e: csv::Error) -> io::Error {
    io::Error::other(e)
}

pub fn write_table2(path: &Path, rows: &[PointRow]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["point", "count", "mean_ms", "stddev_ms", "p50_ms", "p95_ms", "p99_ms"])
        .map_err(csv_err)?;
    for r in rows {
        let s = &r.stats;
        w.write_record([
            r.point.label().to_owned(),
            s.count.to_string(),
            format!("{:.3}", s.mean_ms),
            format!("{:.3}", s.stddev_ms),
            format!("{:.3}", s.p50_ms),
            format!("{:.3}", s.p95_ms),
            format!("{:.3}", s.p99_ms),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

pub fn write_fig8a(path: &Path, sweep: &[(usize, Option<LatencyStats>)]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["n_sensors", "mean_ms", "stddev_ms"]).map_err(csv_err)?;
    for (n, s) in sweep {
        let (mean, sd) = s.map_or((String::new(), String::new()), |s| {
            (format!("{:.3}", s.mean_ms), format!("{:.3}", s.stddev_ms))
        });
        w.write_record([n.to_string(), mean, sd]).map_err(csv_err)?;
    }
    w.flush()
}

pub fn write_fig8b(path: &Path, categories: &BTreeMap<String, LatencyStats>) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["category", "mean_ms", "stddev_ms"]).map_err(csv_err)?;
    for (c, s) in categories {
        w.write_record([c.clone(), format!("{:.3}", s.mean_ms), format!("{:.3}", s.stddev_ms)])
            .map_err(csv_err)?;
    }
    w.flush()
}

/// Means and standard deviations from the original building deployment, which
/// include radio first hops and so are not expected to match a same-host run.
pub const REFERENCE_TABLE2: [(TapPoint, f64, f64); 4] = [
    (TapPoint::Gateway, 57.15, 10.21),
    (TapPoint::Broker, 147.86, 63.56),
    (TapPoint::EventBus, 157.86, 2.35),
    (TapPoint::Client, 159.55, 0.56),
];
pub const REFERENCE_MEAN_MS: f64 = 200.0;
pub const REFERENCE_DEEPDISH_MS: f64 = 400.0;
