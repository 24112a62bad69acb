//! Requests-per-minute budget shared by all callers of one backend.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use super::clock::Clock;

pub const WINDOW: Duration = Duration::from_secs(60);

/// Sliding-window limiter: no half-open 60 s window ever holds more than
/// `rpm` request start times.
///
/// Callers reserve a start slot under the lock and sleep outside it, so
/// concurrent callers queue in reservation order.
#[derive(Debug)]
pub struct RateLimiter {
    rpm: usize,
    slots: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: u32) -> Self {
        RateLimiter {
            rpm: requests_per_minute.max(1) as usize,
            slots: Mutex::new(VecDeque::new()),
        }
    }

    pub fn requests_per_minute(&self) -> u32 {
        self.rpm as u32
    }

    /// Reserves the earliest permissible start time and returns it.
    pub fn reserve(&self, now: Duration) -> Duration {
        let mut slots = self.slots.lock().unwrap();
        let mut slot = now;
        if let Some(&last) = slots.back() {
            slot = slot.max(last);
        }
        if slots.len() >= self.rpm {
            slot = slot.max(slots[slots.len() - self.rpm] + WINDOW);
        }
        slots.push_back(slot);
        while slots.len() > self.rpm {
            slots.pop_front();
        }
        slot
    }

    /// Blocks (via `clock`) until a request may start.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        let now = clock.now();
        let slot = self.reserve(now);
        if slot > now {
            clock.sleep(slot - now);
        }
        slot
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmm::clock::FakeClock;

    #[test]
    fn burst_then_waits_for_window() {
        let clock = FakeClock::new();
        let rl = RateLimiter::new(3);
        let starts: Vec<_> = (0..7).map(|_| rl.acquire(&clock)).collect();
        let secs: Vec<u64> = starts.iter().map(|d| d.as_secs()).collect();
        assert_eq!(secs, [0, 0, 0, 60, 60, 60, 120]);
    }

    #[test]
    fn idle_time_restores_budget() {
        let clock = FakeClock::new();
        let rl = RateLimiter::new(2);
        rl.acquire(&clock);
        rl.acquire(&clock);
        clock.advance(Duration::from_secs(90));
        assert_eq!(rl.acquire(&clock), Duration::from_secs(90));
        assert!(clock.sleeps().is_empty());
    }
}
