//! Random packet generation, frame fuzzing and a set-expansion topic oracle.

use std::collections::BTreeSet;

use rand::Rng;
use sensert_core::wire::{
    decode_packet, encode_packet, Connack, Connect, Packet, Publish, Suback, Subscribe, TopicFilter, TopicName,
    Unsubscribe,
};

const CHARS: &[char] = &['a', 'b', 'z', '0', '9', '-', '_', '.', ' ', '$', 'é', 'ß', '中', '🙂'];

fn text<R: Rng>(rng: &mut R, max: usize, extra: &[char]) -> String {
    let len = rng.random_range(0..=max);
    (0..len)
        .map(|_| {
            if !extra.is_empty() && rng.random_bool(0.2) {
                extra[rng.random_range(0..extra.len())]
            } else {
                CHARS[rng.random_range(0..CHARS.len())]
            }
        })
        .collect()
}

fn topic<R: Rng>(rng: &mut R) -> TopicName {
    loop {
        if let Ok(t) = TopicName::new(text(rng, 40, &['/'])) {
            return t;
        }
    }
}

fn packet_id<R: Rng>(rng: &mut R) -> u16 {
    rng.random_range(1..=u16::MAX)
}

fn filters<R: Rng>(rng: &mut R) -> Vec<String> {
    (0..rng.random_range(1..=5)).map(|_| text(rng, 30, &['/', '+', '#'])).collect()
}

pub fn random_packet<R: Rng>(rng: &mut R) -> Packet {
    match rng.random_range(0..10) {
        0 => Packet::Connect(Connect {
            client_id: text(rng, 23, &[]),
            keep_alive_s: rng.random(),
            clean_session: rng.random(),
        }),
        1 => Packet::Connack(Connack {
            return_code: rng.random_range(0..=5),
        }),
        2 => {
            let len = if rng.random_bool(0.02) {
                rng.random_range(1000..70_000)
            } else {
                rng.random_range(0..200)
            };
            let mut payload = vec![0u8; len];
            rng.fill(&mut payload[..]);
            Packet::Publish(Publish {
                topic: topic(rng),
                payload: payload.into(),
                retain: rng.random(),
            })
        }
        3 => Packet::Subscribe(Subscribe {
            packet_id: packet_id(rng),
            filters: filters(rng),
        }),
        4 => Packet::Suback(Suback {
            packet_id: packet_id(rng),
            granted: (0..rng.random_range(1..=5))
                .map(|_| [0x00, 0x01, 0x02, 0x80][rng.random_range(0..4)])
                .collect(),
        }),
        5 => Packet::Unsubscribe(Unsubscribe {
            packet_id: packet_id(rng),
            filters: filters(rng),
        }),
        6 => Packet::Unsuback {
            packet_id: packet_id(rng),
        },
        7 => Packet::Pingreq,
        8 => Packet::Pingresp,
        _ => Packet::Disconnect,
    }
}

/// Encodes, decodes and re-encodes; `Err` describes the first difference.
pub fn round_trip(packet: &Packet) -> Result<(), String> {
    let bytes = encode_packet(packet).map_err(|e| format!("encode {packet:?}: {e}"))?;
    let (decoded, used) = decode_packet(&bytes)
        .map_err(|e| format!("decode {packet:?}: {e}"))?
        .ok_or_else(|| format!("incomplete after encoding {packet:?}"))?;
    if used != bytes.len() {
        return Err(format!("consumed {used} of {} bytes", bytes.len()));
    }
    if &decoded != packet {
        return Err(format!("decoded {decoded:?}, expected {packet:?}"));
    }
    let again = encode_packet(&decoded).map_err(|e| e.to_string())?;
    if again != bytes {
        return Err(format!("re-encoding {packet:?} changed the bytes"));
    }
    for cut in [0, 1, bytes.len() / 2, bytes.len() - 1] {
        if cut < bytes.len() && !matches!(decode_packet(&bytes[..cut]), Ok(None)) {
            return Err(format!("prefix of {cut} bytes did not ask for more data"));
        }
    }
    Ok(())
}

/// A random frame: pure noise, a plausible header over noise, or a mutated valid frame.
pub fn fuzz_frame<R: Rng>(rng: &mut R) -> Vec<u8> {
    match rng.random_range(0..3) {
        0 => {
            let mut b = vec![0u8; rng.random_range(0..64)];
            rng.fill(&mut b[..]);
            b
        }
        1 => {
            let len = rng.random_range(0..64);
            let mut b = vec![rng.random::<u8>(), len as u8];
            b.extend((0..len).map(|_| rng.random::<u8>()));
            b
        }
        _ => {
            let mut b = encode_packet(&random_packet(rng)).expect("generated packets encode").to_vec();
            for _ in 0..rng.random_range(1..4) {
                match rng.random_range(0..3) {
                    0 if !b.is_empty() => {
                        let i = rng.random_range(0..b.len());
                        b[i] = rng.random();
                    }
                    1 if !b.is_empty() => b.truncate(rng.random_range(0..b.len())),
                    _ => b.push(rng.random()),
                }
            }
            b
        }
    }
}

/// Decodes every frame in the buffer until it errors or runs dry, as a session would.
pub fn decode_all(mut buf: &[u8]) -> usize {
    let mut n = 0;
    while let Ok(Some((_, used))) = decode_packet(buf) {
        assert!(used > 0 && used <= buf.len());
        buf = &buf[used..];
        n += 1;
    }
    n
}

pub const MAX_DEPTH: usize = 4;

fn sequences(alphabet: &[&str], min: usize, max: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<String>> = vec![Vec::new()];
    for depth in 0..=max {
        if depth >= min {
            out.extend(layer.iter().cloned());
        }
        layer = layer
            .iter()
            .flat_map(|s| {
                alphabet.iter().map(move |a| {
                    let mut next = s.clone();
                    next.push((*a).to_owned());
                    next
                })
            })
            .collect();
    }
    out
}

pub fn all_topics() -> Vec<Vec<String>> {
    sequences(&["a", "b"], 1, MAX_DEPTH)
}

pub fn all_filter_strings() -> Vec<Vec<String>> {
    sequences(&["a", "b", "+", "#"], 1, MAX_DEPTH)
}

/// Every topic of depth ≤ MAX_DEPTH over {a, b} the filter stands for, built level by level.
pub fn expand(filter: &[String]) -> BTreeSet<Vec<String>> {
    let mut partial: BTreeSet<Vec<String>> = BTreeSet::from([Vec::new()]);
    for (i, level) in filter.iter().enumerate() {
        let last = i + 1 == filter.len();
        partial = match level.as_str() {
            "#" if last => {
                let mut grown = BTreeSet::new();
                for p in &partial {
                    for tail in sequences(&["a", "b"], 0, MAX_DEPTH.saturating_sub(p.len())) {
                        let mut t = p.clone();
                        t.extend(tail);
                        grown.insert(t);
                    }
                }
                grown
            }
            "+" => partial
                .iter()
                .flat_map(|p| {
                    ["a", "b"].into_iter().map(move |l| {
                        let mut t = p.clone();
                        t.push(l.to_owned());
                        t
                    })
                })
                .collect(),
            literal => partial
                .into_iter()
                .map(|mut p| {
                    p.push(literal.to_owned());
                    p
                })
                .collect(),
        };
    }
    partial.into_iter().filter(|t| !t.is_empty() && t.len() <= MAX_DEPTH).collect()
}

pub fn filter_is_valid(levels: &[String]) -> bool {
    levels
        .iter()
        .enumerate()
        .all(|(i, l)| l != "#" || i + 1 == levels.len())
}

#[derive(Debug, Default)]
pub struct TopicOutcome {
    pub filters: usize,
    pub pairs: usize,
    pub mismatches: Vec<String>,
}

/// Compares the matcher against the expansion oracle on every filter and topic of depth ≤ 4.
pub fn exhaustive_topic_check() -> TopicOutcome {
    let topics = all_topics();
    let mut out = TopicOutcome::default();
    for levels in all_filter_strings() {
        let raw = levels.join("/");
        let parsed = TopicFilter::new(raw.as_str());
        if parsed.is_ok() != filter_is_valid(&levels) {
            out.mismatches.push(format!("validation of {raw}: {parsed:?}"));
            continue;
        }
        let Ok(filter) = parsed else { continue };
        out.filters += 1;
        let expected = expand(&levels);
        for t in &topics {
            let name = TopicName::new(t.join("/")).expect("plain topic");
            out.pairs += 1;
            if filter.matches(&name) != expected.contains(t) {
                out.mismatches.push(format!("{raw} vs {name}"));
            }
        }
    }
    out
}
