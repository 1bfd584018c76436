//! Host clock shared by every component in a process.
//!
//! Epoch time is sampled once and advanced with a monotonic `Instant`, so readings
//! taken at successive points of a message's path never go backwards.

use std::sync::OnceLock;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};

fn anchor() -> &'static (i64, Instant) {
    static ANCHOR: OnceLock<(i64, Instant)> = OnceLock::new();
    ANCHOR.get_or_init(|| {
        let since_epoch = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .expect("system clock before 1970");
        (since_epoch.as_micros() as i64, Instant::now())
    })
}

/// Epoch microseconds.
pub fn now_us() -> i64 {
    let (epoch_us, start) = anchor();
    epoch_us + start.elapsed().as_micros() as i64
}

/// Epoch milliseconds.
pub fn now_ms() -> u64 {
    (now_us() / 1000) as u64
}

/// Source of "now" for components whose behavior depends on message age.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct HostClock;

impl Clock for HostClock {
    fn now_ms(&self) -> u64 {
        now_ms()
    }
}

/// Manually advanced clock for tests.
#[derive(Debug, Default)]
pub struct ManualClock(std::sync::atomic::AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(std::sync::atomic::AtomicU64::new(start_ms))
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, std::sync::atomic::Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, std::sync::atomic::Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(std::sync::atomic::Ordering::SeqCst)
    }
}

pub fn to_datetime(epoch_ms: u64) -> DateTime<Utc> {
    Utc.timestamp_millis_opt(epoch_ms as i64)
        .single()
        .unwrap_or_default()
}

/// RFC 3339 with millisecond precision, `Z` suffix.
pub fn to_rfc3339(epoch_ms: u64) -> String {
    to_datetime(epoch_ms).to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Accepts RFC 3339 and bare `YYYY-MM-DDTHH:MM:SS[.fff]` (read as UTC).
pub fn parse_time_ms(raw: &str) -> Option<u64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return u64::try_from(dt.timestamp_millis()).ok();
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(naive) = chrono::NaiveDateTime::parse_from_str(raw, fmt) {
            return u64::try_from(naive.and_utc().timestamp_millis()).ok();
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone() {
        let a = now_us();
        let b = now_us();
        assert!(b >= a);
    }

    #[test]
    fn time_parsing() {
        assert_eq!(parse_time_ms("2020-06-01T10:00:00Z"), Some(1_591_005_600_000));
        assert_eq!(parse_time_ms("2020-06-01T10:00:00"), Some(1_591_005_600_000));
        assert_eq!(parse_time_ms("2020-06-01T10:00:00.250"), Some(1_591_005_600_250));
        assert_eq!(
            parse_time_ms("2020-06-01T11:00:00+01:00"),
            Some(1_591_005_600_000)
        );
        assert_eq!(parse_time_ms("yesterday"), None);
        assert_eq!(to_rfc3339(1_591_005_600_250), "2020-06-01T10:00:00.250Z");
    }
}
