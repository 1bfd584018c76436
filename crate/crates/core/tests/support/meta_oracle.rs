//! Randomized metadata histories checked against linear-scan oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sensert_core::metadata::{
    ContainerKind, DeviceMetadataRecord, Location, MetadataStore, SpatialContainer,
};

#[derive(Clone)]
enum Event {
    Container { id: String, ts: u64, parent: Option<String> },
    Device { id: String, ts: u64, container: String },
}

#[derive(Default)]
struct Oracle {
    events: Vec<Event>,
}

impl Oracle {
    fn asof_device(&self, device: &str, t: u64) -> Option<(u64, String)> {
        let mut best: Option<(u64, String)> = None;
        for e in &self.events {
            if let Event::Device { id, ts, container } = e {
                if id == device && *ts <= t && best.as_ref().is_none_or(|(b, _)| ts > b) {
                    best = Some((*ts, container.clone()));
                }
            }
        }
        best
    }

    fn parent(&self, container: &str, t: u64) -> Option<String> {
        let mut best: Option<(u64, Option<String>)> = None;
        for e in &self.events {
            if let Event::Container { id, ts, parent } = e {
                if id == container && *ts <= t && best.as_ref().is_none_or(|(b, _)| ts > b) {
                    best = Some((*ts, parent.clone()));
                }
            }
        }
        best.and_then(|(_, p)| p)
    }

    fn devices_in(&self, container: &str, t: u64) -> Vec<String> {
        let mut ids: Vec<String> = self
            .events
            .iter()
            .filter_map(|e| match e {
                Event::Device { id, .. } => Some(id.clone()),
                _ => None,
            })
            .collect();
        ids.sort();
        ids.dedup();
        ids.into_iter()
            .filter(|d| {
                let Some((_, mut at)) = self.asof_device(d, t) else { return false };
                for _ in 0..8 {
                    if at == container {
                        return true;
                    }
                    match self.parent(&at, t) {
                        Some(p) => at = p,
                        None => return false,
                    }
                }
                false
            })
            .collect()
    }
}

pub struct HistoryOutcome {
    pub queries: usize,
    pub mismatches: Vec<String>,
}

/// Builds one random history from `seed`, checking every answer against the oracle.
pub fn check_history(seed: u64) -> HistoryOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = MetadataStore::in_memory();
    let mut oracle = Oracle::default();
    let mut mismatches = Vec::new();
    let mut queries = 0;

    let add = |store: &MetadataStore, oracle: &mut Oracle, c: SpatialContainer| {
        oracle.events.push(Event::Container {
            id: c.container_id.clone(),
            ts: 0,
            parent: c.parent_id.clone(),
        });
        store.add_container(c, 0).expect("generated container is valid");
    };
    add(&store, &mut oracle, SpatialContainer::new("B", ContainerKind::Building, None));
    let mut floors = Vec::new();
    let mut rooms = Vec::new();
    let mut desks = Vec::new();
    for f in 0..2 {
        let floor = format!("F{f}");
        add(&store, &mut oracle, SpatialContainer::new(&floor, ContainerKind::Floor, Some("B")));
        for r in 0..rng.random_range(2..=4) {
            let room = format!("{floor}R{r}");
            add(&store, &mut oracle, SpatialContainer::new(&room, ContainerKind::Room, Some(&floor)));
            for d in 0..rng.random_range(0..=2) {
                let desk = format!("{room}D{d}");
                add(&store, &mut oracle, SpatialContainer::new(&desk, ContainerKind::Desk, Some(&room)));
                desks.push(desk);
            }
            rooms.push(room);
        }
        floors.push(floor);
    }
    let mut all: Vec<String> = vec!["B".into()];
    all.extend(floors.iter().cloned());
    all.extend(rooms.iter().cloned());
    all.extend(desks.iter().cloned());

    let compare_all = |store: &MetadataStore, oracle: &Oracle, t: u64, queries: &mut usize, mismatches: &mut Vec<String>| {
        for c in &all {
            *queries += 1;
            let got = store.devices_in(c, t).expect("container exists");
            let want = oracle.devices_in(c, t);
            if got != want {
                mismatches.push(format!("seed {seed}: devices_in({c}, {t}) = {got:?}, oracle {want:?}"));
            }
        }
    };

    let mut t = 0u64;
    let steps = rng.random_range(20..60);
    for _ in 0..steps {
        t += rng.random_range(1..50);
        let roll = rng.random_range(0..10);
        if roll < 7 {
            let device = format!("d{}", rng.random_range(0..8));
            let container = all[rng.random_range(1..all.len())].clone();
            let loc = Location {
                x_m: rng.random_range(0.0..50.0),
                y_m: rng.random_range(0.0..30.0),
                floor: 1,
                h_m: 0.8,
                container_id: container.clone(),
            };
            store
                .upsert_device(DeviceMetadataRecord::new(&device, t, &loc))
                .expect("generated record is valid");
            oracle.events.push(Event::Device { id: device, ts: t, container });
        } else {
            let (child, parent) = if roll < 9 && !desks.is_empty() {
                (desks[rng.random_range(0..desks.len())].clone(), rooms[rng.random_range(0..rooms.len())].clone())
            } else {
                (rooms[rng.random_range(0..rooms.len())].clone(), floors[rng.random_range(0..floors.len())].clone())
            };
            let before = rng.random_range(0..t);
            let snapshot: Vec<Vec<String>> =
                all.iter().map(|c| store.devices_in(c, before).unwrap()).collect();
            store.reparent(&child, Some(&parent), t).expect("generated reparent is valid");
            oracle.events.push(Event::Container { id: child.clone(), ts: t, parent: Some(parent) });
            for (c, old) in all.iter().zip(snapshot) {
                queries += 1;
                let now = store.devices_in(c, before).unwrap();
                if now != old {
                    mismatches.push(format!("seed {seed}: reparent of {child} at {t} changed devices_in({c}, {before})"));
                }
            }
        }
    }

    for _ in 0..20 {
        let q = rng.random_range(0..t + 50);
        for d in 0..8 {
            let device = format!("d{d}");
            queries += 1;
            let got = store.get_asof(&device, q).map(|r| {
                let loc = r.location().expect("stored record has a location");
                (r.ts, loc.container_id)
            });
            let want = oracle.asof_device(&device, q);
            if got != want {
                mismatches.push(format!("seed {seed}: get_asof({device}, {q}) = {got:?}, oracle {want:?}"));
            }
        }
    }
    for _ in 0..3 {
        let q = rng.random_range(0..t + 50);
        compare_all(&store, &oracle, q, &mut queries, &mut mismatches);
    }
    compare_all(&store, &oracle, t, &mut queries, &mut mismatches);
    HistoryOutcome { queries, mismatches }
}
