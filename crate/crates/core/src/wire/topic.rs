//! Topic names, topic filters and wildcard matching.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{WireError, MAX_STRING_LEN};

const SEPARATOR: char = '/';

/// A concrete, wildcard-free topic a message is published to.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(raw: impl Into<String>) -> Result<Self, WireError> {
        let raw = raw.into();
        if raw.is_empty() {
            return Err(WireError::InvalidTopic {
                topic: raw,
                reason: "topic name is empty",
            });
        }
        if raw.len() > MAX_STRING_LEN {
            return Err(WireError::InvalidTopic {
                topic: raw,
                reason: "topic name longer than 65535 bytes",
            });
        }
        if let Some(reason) = raw.chars().find_map(|c| match c {
            '+' | '#' => Some("wildcard in topic name"),
            '\0' => Some("NUL in topic name"),
            _ => None,
        }) {
            return Err(WireError::InvalidTopic { topic: raw, reason });
        }
        Ok(Self(raw))
    }

    /// Joins wildcard-free fragments with `/`.
    pub fn from_levels<I, S>(levels: I) -> Result<Self, WireError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let joined = levels
            .into_iter()
            .map(|l| l.as_ref().to_owned())
            .collect::<Vec<_>>()
            .join("/");
        Self::new(joined)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> impl Iterator<Item = &str> {
        self.0.split(SEPARATOR)
    }

    /// The `index`-th level, if present.
    pub fn level(&self, index: usize) -> Option<&str> {
        self.levels().nth(index)
    }

    /// `prefix/self`; a trailing `/` on the prefix is not doubled.
    pub fn with_prefix(&self, prefix: &str) -> Result<Self, WireError> {
        let prefix = prefix.trim_end_matches(SEPARATOR);
        if prefix.is_empty() {
            return Ok(self.clone());
        }
        Self::new(format!("{prefix}/{}", self.0))
    }

    /// Removes a leading `prefix/`, returning `None` when the topic lies outside it.
    pub fn strip_prefix(&self, prefix: &str) -> Option<Self> {
        let prefix = prefix.trim_end_matches(SEPARATOR);
        if prefix.is_empty() {
            return Some(self.clone());
        }
        let rest = self.0.strip_prefix(prefix)?.strip_prefix(SEPARATOR)?;
        Self::new(rest).ok()
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for TopicName {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

impl AsRef<str> for TopicName {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// One level of a topic filter.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FilterLevel {
    Literal(String),
    /// `+`
    SingleWildcard,
    /// `#`, only ever the last level
    MultiWildcard,
}

/// A subscription pattern. Keeps the raw string so it can be re-encoded verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    raw: String,
    levels: Vec<FilterLevel>,
}

impl TopicFilter {
    pub fn new(raw: impl Into<String>) -> Result<Self, WireError> {
        validate_filter(&raw.into())
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn levels(&self) -> &[FilterLevel] {
        &self.levels
    }

    pub fn has_wildcards(&self) -> bool {
        self.levels.iter().any(|l| !matches!(l, FilterLevel::Literal(_)))
    }

    pub fn matches(&self, topic: &TopicName) -> bool {
        topic_matches(self, topic)
    }

    /// `prefix/self`, used by bridges to map remote filters into the local namespace.
    pub fn with_prefix(&self, prefix: &str) -> Result<Self, WireError> {
        let prefix = prefix.trim_end_matches(SEPARATOR);
        if prefix.is_empty() {
            return Ok(self.clone());
        }
        Self::new(format!("{prefix}/{}", self.raw))
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl FromStr for TopicFilter {
    type Err = WireError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

macro_rules! string_serde {
    ($ty:ty) => {
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let raw = String::deserialize(deserializer)?;
                raw.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

string_serde!(TopicName);
string_serde!(TopicFilter);

/// Parses a filter, rejecting misplaced wildcards with the byte offset of the offending level.
pub fn validate_filter(raw: &str) -> Result<TopicFilter, WireError> {
    let invalid = |position: usize, reason: &'static str| WireError::InvalidFilter {
        filter: raw.to_owned(),
        position,
        reason,
    };
    if raw.is_empty() {
        return Err(invalid(0, "filter is empty"));
    }
    if raw.len() > MAX_STRING_LEN {
        return Err(invalid(0, "filter longer than 65535 bytes"));
    }
    if let Some(pos) = raw.find('\0') {
        return Err(invalid(pos, "NUL in filter"));
    }

    let count = raw.split(SEPARATOR).count();
    let mut levels = Vec::with_capacity(count);
    let mut offset = 0;
    for (i, level) in raw.split(SEPARATOR).enumerate() {
        let parsed = match level {
            "+" => FilterLevel::SingleWildcard,
            "#" if i + 1 == count => FilterLevel::MultiWildcard,
            "#" => return Err(invalid(offset, "'#' must be the last level")),
            _ => {
                if let Some(p) = level.find(['+', '#']) {
                    return Err(invalid(offset + p, "wildcard must occupy a whole level"));
                }
                FilterLevel::Literal(level.to_owned())
            }
        };
        levels.push(parsed);
        offset += level.len() + 1;
    }
    Ok(TopicFilter {
        raw: raw.to_owned(),
        levels,
    })
}

/// Level-wise match: `+` consumes exactly one level, `#` the remainder including
/// zero levels (so `a/#` matches `a`).
pub fn topic_matches(filter: &TopicFilter, topic: &TopicName) -> bool {
    let mut topic_levels = topic.levels();
    for level in &filter.levels {
        match level {
            FilterLevel::MultiWildcard => return true,
            FilterLevel::SingleWildcard => {
                if topic_levels.next().is_none() {
                    return false;
                }
            }
            FilterLevel::Literal(lit) => match topic_levels.next() {
                Some(t) if t == lit => {}
                _ => return false,
            },
        }
    }
    topic_levels.next().is_none()
}
