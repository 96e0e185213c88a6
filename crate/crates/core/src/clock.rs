//! Time sources. Everything that stamps an event takes a [`Clock`] so that
//! runs against the logical clock produce byte-identical logs.

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, TimeZone, Utc};

pub type Timestamp = DateTime<Utc>;

pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Wall-clock time.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Utc::now()
    }
}

/// Deterministic clock: starts at a fixed instant and advances by a fixed
/// step every time it is read.
#[derive(Debug)]
pub struct LogicalClock {
    next_millis: AtomicI64,
    step_millis: i64,
}

impl LogicalClock {
    pub fn new(start: Timestamp, step_millis: i64) -> Self {
        Self { next_millis: AtomicI64::new(start.timestamp_millis()), step_millis }
    }

    /// 2024-01-01T00:00:00Z, one second per reading.
    pub fn starting_2024() -> Self {
        Self::new(Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap(), 1_000)
    }

    /// Jump forward, e.g. to simulate the next day.
    pub fn advance_millis(&self, millis: i64) {
        self.next_millis.fetch_add(millis, Ordering::SeqCst);
    }
}

impl Clock for LogicalClock {
    fn now(&self) -> Timestamp {
        let ms = self.next_millis.fetch_add(self.step_millis, Ordering::SeqCst);
        Utc.timestamp_millis_opt(ms).single().expect("logical clock in range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logical_clock_is_monotone_and_reproducible() {
        let a = LogicalClock::starting_2024();
        let b = LogicalClock::starting_2024();
        let ta: Vec<_> = (0..5).map(|_| a.now()).collect();
        let tb: Vec<_> = (0..5).map(|_| b.now()).collect();
        assert_eq!(ta, tb);
        assert!(ta.windows(2).all(|w| w[0] < w[1]));
    }
}
