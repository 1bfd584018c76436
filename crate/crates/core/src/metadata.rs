//! Spatio-temporal metadata: container hierarchy and per-device documents,
//! both append-only and queryable as of any past time.
//!
//! Persistence is two JSON-lines journals (`containers.jsonl`, `devices.jsonl`),
//! one `{"id", "ts", "doc"}` object per line, replayed into memory on open.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const DEVICES_JOURNAL: &str = "devices.jsonl";
pub const CONTAINERS_JOURNAL: &str = "containers.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("invalid record: {0}")]
    Validation(String),
    #[error("{id}: timestamp {ts} is not after the latest record at {latest}")]
    StaleTimestamp { id: String, ts: u64, latest: u64 },
    #[error("unknown container {0}")]
    UnknownContainer(String),
    #[error("container {0} already exists")]
    DuplicateContainer(String),
    #[error("moving {id} under {parent} would create a cycle")]
    Cycle { id: String, parent: String },
    #[error("a {child:?} cannot sit under a {parent:?}")]
    Kind { child: ContainerKind, parent: ContainerKind },
    #[error("journal {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("journal {path} line {line}: {reason}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Coarse to fine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerKind {
    Building,
    Floor,
    Room,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialContainer {
    pub container_id: String,
    #[serde(default)]
    pub parent_id: Option<String>,
    pub kind: ContainerKind,
    #[serde(default)]
    pub name: String,
    /// Outline in building metres.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Vec<[f64; 2]>>,
}

impl SpatialContainer {
    pub fn new(id: &str, kind: ContainerKind, parent: Option<&str>) -> Self {
        Self {
            container_id: id.to_owned(),
            parent_id: parent.map(str::to_owned),
            kind,
            name: id.to_owned(),
            geometry: None,
        }
    }
}

/// Metres from the building origin; vertical position is floor plus height above it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x_m: f64,
    pub y_m: f64,
    pub floor: i32,
    #[serde(default)]
    pub h_m: f64,
    pub container_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceMetadataRecord {
    pub device_id: String,
    pub ts: u64,
    pub doc: Map<String, Value>,
}

impl DeviceMetadataRecord {
    pub fn new(device_id: &str, ts: u64, location: &Location) -> Self {
        let mut doc = Map::new();
        doc.insert("ts".into(), ts.into());
        doc.insert(
            "location".into(),
            serde_json::to_value(location).expect("location serializes"),
        );
        Self {
            device_id: device_id.to_owned(),
            ts,
            doc,
        }
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.doc.insert(key.to_owned(), value);
        self
    }

    pub fn location(&self) -> Result<Location, MetaError> {
        let raw = self
            .doc
            .get("location")
            .ok_or_else(|| MetaError::Validation("doc has no location".into()))?;
        serde_json::from_value(raw.clone())
            .map_err(|e| MetaError::Validation(format!("bad location: {e}")))
    }
}

#[derive(Serialize, Deserialize)]
struct JournalLine {
    id: String,
    ts: u64,
    doc: Value,
}

/// Records for one id, ascending by ts.
fn asof<T>(history: &[(u64, T)], t: u64) -> Option<&T> {
    let n = history.partition_point(|(ts, _)| *ts <= t);
    n.checked_sub(1).map(|i| &history[i].1)
}

#[derive(Default)]
struct Index {
    devices: HashMap<String, Vec<(u64, DeviceMetadataRecord)>>,
    device_locations: HashMap<String, Vec<(u64, String)>>,
    containers: HashMap<String, Vec<(u64, SpatialContainer)>>,
}

impl Index {
    fn latest_ts<T>(history: Option<&Vec<(u64, T)>>) -> Option<u64> {
        history.and_then(|h| h.last()).map(|(ts, _)| *ts)
    }

    fn container_asof(&self, id: &str, t: u64) -> Option<&SpatialContainer> {
        self.containers.get(id).and_then(|h| asof(h, t))
    }

    fn container_latest(&self, id: &str) -> Option<&SpatialContainer> {
        self.containers.get(id).and_then(|h| h.last()).map(|(_, c)| c)
    }

    /// True if `ancestor` is `id` or above it at time `t`.
    fn is_within(&self, id: &str, ancestor: &str, t: u64) -> bool {
        let mut current = Some(id.to_owned());
        let mut hops = 0;
        while let Some(c) = current {
            if c == ancestor {
                return true;
            }
            hops += 1;
            if hops > self.containers.len() {
                return false;
            }
            current = self.container_asof(&c, t).and_then(|c| c.parent_id.clone());
        }
        false
    }

    fn check_device(&self, rec: &DeviceMetadataRecord) -> Result<String, MetaError> {
        if rec.device_id.is_empty() {
            return Err(MetaError::Validation("empty device id".into()));
        }
        if let Some(ts) = rec.doc.get("ts") {
            if ts.as_u64() != Some(rec.ts) {
                return Err(MetaError::Validation(format!("doc ts {ts} differs from record ts {}", rec.ts)));
            }
        }
        let loc = rec.location()?;
        if !(loc.x_m >= 0.0 && loc.y_m >= 0.0) {
            return Err(MetaError::Validation("x_m and y_m must be non-negative".into()));
        }
        if !self.containers.contains_key(&loc.container_id) {
            return Err(MetaError::UnknownContainer(loc.container_id));
        }
        if let Some(latest) = Self::latest_ts(self.devices.get(&rec.device_id)) {
            if rec.ts <= latest {
                return Err(MetaError::StaleTimestamp {
                    id: rec.device_id.clone(),
                    ts: rec.ts,
                    latest,
                });
            }
        }
        Ok(loc.container_id)
    }

    fn apply_device(&mut self, mut rec: DeviceMetadataRecord, container_id: String) {
        rec.doc.entry("ts").or_insert(rec.ts.into());
        self.device_locations
            .entry(rec.device_id.clone())
            .or_default()
            .push((rec.ts, container_id));
        self.devices
            .entry(rec.device_id.clone())
            .or_default()
            .push((rec.ts, rec));
    }

    fn check_parent(&self, child: &SpatialContainer, t: u64) -> Result<(), MetaError> {
        let Some(parent_id) = &child.parent_id else { return Ok(()) };
        let parent = self
            .container_latest(parent_id)
            .ok_or_else(|| MetaError::UnknownContainer(parent_id.clone()))?;
        if self.is_within(parent_id, &child.container_id, t.max(self.max_container_ts())) {
            return Err(MetaError::Cycle {
                id: child.container_id.clone(),
                parent: parent_id.clone(),
            });
        }
        if parent.kind >= child.kind {
            return Err(MetaError::Kind {
                child: child.kind,
                parent: parent.kind,
            });
        }
        Ok(())
    }

    fn max_container_ts(&self) -> u64 {
        self.containers
            .values()
            .filter_map(|h| h.last())
            .map(|(ts, _)| *ts)
            .max()
            .unwrap_or(0)
    }

    fn check_container_version(&self, c: &SpatialContainer, ts: u64, is_new: bool) -> Result<(), MetaError> {
        if c.container_id.is_empty() {
            return Err(MetaError::Validation("empty container id".into()));
        }
        match self.containers.get(&c.container_id) {
            Some(_) if is_new => return Err(MetaError::DuplicateContainer(c.container_id.clone())),
            Some(history) => {
                let (latest, prev) = history.last().expect("histories are never empty");
                if ts <= *latest {
                    return Err(MetaError::StaleTimestamp {
                        id: c.container_id.clone(),
                        ts,
                        latest: *latest,
                    });
                }
                if prev.kind != c.kind {
                    return Err(MetaError::Validation("container kind cannot change".into()));
                }
            }
            None if !is_new => return Err(MetaError::UnknownContainer(c.container_id.clone())),
            None => {}
        }
        self.check_parent(c, ts)
    }

    fn apply_container(&mut self, ts: u64, c: SpatialContainer) {
        self.containers
            .entry(c.container_id.clone())
            .or_default()
            .push((ts, c));
    }
}

struct Journals {
    devices: Option<(PathBuf, File)>,
    containers: Option<(PathBuf, File)>,
}

fn append(target: &mut Option<(PathBuf, File)>, line: &JournalLine) -> Result<(), MetaError> {
    let Some((path, file)) = target else { return Ok(()) };
    let mut text = serde_json::to_string(line).expect("journal line serializes");
    text.push('\n');
    file.write_all(text.as_bytes())
        .and_then(|_| file.flush())
        .map_err(|source| MetaError::Io {
            path: path.clone(),
            source,
        })
}

/// Append-only metadata store. Reads run concurrently; writes are serialized.
pub struct MetadataStore {
    index: RwLock<Index>,
    journals: Mutex<Journals>,
}

impl MetadataStore {
    pub fn in_memory() -> Self {
        Self {
            index: RwLock::new(Index::default()),
            journals: Mutex::new(Journals {
                devices: None,
                containers: None,
            }),
        }
    }

    /// Opens (or creates) the journals in `dir` and rebuilds the index.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, MetaError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| MetaError::Io {
            path: dir.to_owned(),
            source,
        })?;
        let mut index = Index::default();
        let containers_path = dir.join(CONTAINERS_JOURNAL);
        for (line_no, line) in read_journal(&containers_path)? {
            let c: SpatialContainer = serde_json::from_value(line.doc).map_err(|e| MetaError::Corrupt {
                path: containers_path.clone(),
                line: line_no,
                reason: e.to_string(),
            })?;
            index.apply_container(line.ts, c);
        }
        let devices_path = dir.join(DEVICES_JOURNAL);
        for (line_no, line) in read_journal(&devices_path)? {
            let corrupt = |reason: String| MetaError::Corrupt {
                path: devices_path.clone(),
                line: line_no,
                reason,
            };
            let Value::Object(doc) = line.doc else {
                return Err(corrupt("doc is not an object".into()));
            };
            let rec = DeviceMetadataRecord {
                device_id: line.id,
                ts: line.ts,
                doc,
            };
            let container = rec.location().map_err(|e| corrupt(e.to_string()))?.container_id;
            index.apply_device(rec, container);
        }
        let open = |path: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|source| MetaError::Io {
                    path: path.to_owned(),
                    source,
                })
        };
        Ok(Self {
            journals: Mutex::new(Journals {
                devices: Some((devices_path.clone(), open(&devices_path)?)),
                containers: Some((containers_path.clone(), open(&containers_path)?)),
            }),
            index: RwLock::new(index),
        })
    }

    pub fn add_container(&self, container: SpatialContainer, ts: u64) -> Result<(), MetaError> {
        let mut journals = self.journals.lock();
        self.index.read().check_container_version(&container, ts, true)?;
        append(
            &mut journals.containers,
            &JournalLine {
                id: container.container_id.clone(),
                ts,
                doc: serde_json::to_value(&container).expect("container serializes"),
            },
        )?;
        self.index.write().apply_container(ts, container);
        Ok(())
    }

    /// Moves a container under a new parent from `t` on.
    pub fn reparent(&self, container_id: &str, new_parent: Option<&str>, t: u64) -> Result<(), MetaError> {
        let mut journals = self.journals.lock();
        let next = {
            let index = self.index.read();
            let current = index
                .container_latest(container_id)
                .ok_or_else(|| MetaError::UnknownContainer(container_id.to_owned()))?;
            let next = SpatialContainer {
                parent_id: new_parent.map(str::to_owned),
                ..current.clone()
            };
            index.check_container_version(&next, t, false)?;
            next
        };
        append(
            &mut journals.containers,
            &JournalLine {
                id: container_id.to_owned(),
                ts: t,
                doc: serde_json::to_value(&next).expect("container serializes"),
            },
        )?;
        self.index.write().apply_container(t, next);
        Ok(())
    }

    pub fn upsert_device(&self, rec: DeviceMetadataRecord) -> Result<(), MetaError> {
        let mut journals = self.journals.lock();
        let container = self.index.read().check_device(&rec)?;
        let mut rec = rec;
        rec.doc.entry("ts").or_insert(rec.ts.into());
        append(
            &mut journals.devices,
            &JournalLine {
                id: rec.device_id.clone(),
                ts: rec.ts,
                doc: Value::Object(rec.doc.clone()),
            },
        )?;
        self.index.write().apply_device(rec, container);
        Ok(())
    }

    /// The record with the greatest ts not after `t`.
    pub fn get_asof(&self, device_id: &str, t: u64) -> Option<DeviceMetadataRecord> {
        let index = self.index.read();
        index.devices.get(device_id).and_then(|h| asof(h, t)).cloned()
    }

    pub fn history(&self, device_id: &str) -> Vec<DeviceMetadataRecord> {
        let index = self.index.read();
        index
            .devices
            .get(device_id)
            .map(|h| h.iter().map(|(_, r)| r.clone()).collect())
            .unwrap_or_default()
    }

    pub fn container_asof(&self, container_id: &str, t: u64) -> Option<SpatialContainer> {
        self.index.read().container_asof(container_id, t).cloned()
    }

    /// Devices located in the container or anything under it, as of `t`. Sorted.
    pub fn devices_in(&self, container_id: &str, t: u64) -> Result<Vec<String>, MetaError> {
        let index = self.index.read();
        if !index.containers.contains_key(container_id) {
            return Err(MetaError::UnknownContainer(container_id.to_owned()));
        }
        let mut out = BTreeSet::new();
        for (device, locations) in &index.device_locations {
            if let Some(at) = asof(locations, t) {
                if index.is_within(at, container_id, t) {
                    out.insert(device.clone());
                }
            }
        }
        Ok(out.into_iter().collect())
    }

    pub fn device_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.index.read().devices.keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Applies an import file: one JSON object per line with a `type` of
    /// `container`, `reparent` or `device`.
    pub fn import(&self, path: impl AsRef<Path>) -> Result<ImportSummary, MetaError> {
        let path = path.as_ref();
        let mut summary = ImportSummary::default();
        let text = std::fs::read_to_string(path).map_err(|source| MetaError::Io {
            path: path.to_owned(),
            source,
        })?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let corrupt = |reason: String| MetaError::Corrupt {
                path: path.to_owned(),
                line: i + 1,
                reason,
            };
            let item: ImportItem = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            match item {
                ImportItem::Container { ts, container } => {
                    self.add_container(container, ts)?;
                    summary.containers += 1;
                }
                ImportItem::Reparent { id, parent, ts } => {
                    self.reparent(&id, parent.as_deref(), ts)?;
                    summary.reparents += 1;
                }
                ImportItem::Device { id, ts, doc } => {
                    self.upsert_device(DeviceMetadataRecord {
                        device_id: id,
                        ts,
                        doc,
                    })?;
                    summary.devices += 1;
                }
            }
        }
        Ok(summary)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ImportSummary {
    pub containers: usize,
    pub reparents: usize,
    pub devices: usize,
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ImportItem {
    Container {
        ts: u64,
        #[serde(flatten)]
        container: SpatialContainer,
    },
    Reparent {
        id: String,
        parent: Option<String>,
        ts: u64,
    },
    Device {
        id: String,
        ts: u64,
        doc: Map<String, Value>,
    },
}

fn read_journal(path: &Path) -> Result<Vec<(usize, JournalLine)>, MetaError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(MetaError::Io {
                path: path.to_owned(),
                source,
            })
        }
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| MetaError::Io {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line).map_err(|e| MetaError::Corrupt {
            path: path.to_owned(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push((i + 1, parsed));
    }
    Ok(out)
}
