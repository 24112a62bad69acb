//! Exponential backoff with jitter.

use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub factor: f64,
    /// Upper bound of the multiplicative jitter: delay * (1 + U[0, jitter)).
    pub jitter: f64,
    rng: Mutex<ChaCha8Rng>,
}

impl RetryPolicy {
    pub fn new(max_retries: u32, base: Duration, factor: f64, jitter: f64, seed: u64) -> Self {
        RetryPolicy {
            max_retries,
            base,
            factor,
            jitter: jitter.max(0.0),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(attempt as i32);
        let j = if self.jitter > 0.0 {
            self.rng.lock().unwrap().random_range(0.0..self.jitter)
        } else {
            0.0
        };
        Duration::from_secs_f64(nominal * (1.0 + j))
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy::new(5, Duration::from_secs(1), 2.0, 0.2, 0x7572_2d73_6967_6e73)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delays_double_within_jitter_band() {
        let p = RetryPolicy::default();
        for attempt in 0..5 {
            let nominal = 2f64.powi(attempt as i32);
            let d = p.delay(attempt).as_secs_f64();
            assert!(d >= nominal && d < nominal * 1.2, "attempt {attempt}: {d}");
        }
    }

    #[test]
    fn no_jitter_is_exact() {
        let p = RetryPolicy::new(3, Duration::from_millis(500), 2.0, 0.0, 1);
        assert_eq!(p.delay(0), Duration::from_millis(500));
        assert_eq!(p.delay(2), Duration::from_secs(2));
    }
}
