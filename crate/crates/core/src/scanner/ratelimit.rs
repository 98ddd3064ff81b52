use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::probe::Pacer;

/// Share of the configured rate actually used, leaving room for scheduling
/// jitter between our clock and the receiver's.
const HEADROOM: f64 = 0.95;

/// Shared pacer: datagrams leave at least `1 / (rate * HEADROOM)` seconds
/// apart, across all threads. A bucket of depth one, so there are no bursts.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    /// `rate` in datagrams per second; must be positive.
    pub fn new(rate: f64) -> Option<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return None;
        }
        Some(RateLimiter { interval: Duration::from_secs_f64(1.0 / (rate * HEADROOM)), next: Mutex::new(None) })
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Reserves the next send slot and returns when it is due.
    fn reserve(&self) -> Instant {
        let mut next = self.next.lock().expect("rate limiter lock");
        let now = Instant::now();
        let slot = next.map_or(now, |n| n.max(now));
        *next = Some(slot + self.interval);
        slot
    }
}

impl Pacer for RateLimiter {
    fn acquire(&self) {
        let slot = self.reserve();
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn rejects_nonpositive() {
        assert!(RateLimiter::new(0.0).is_none());
        assert!(RateLimiter::new(-1.0).is_none());
        assert!(RateLimiter::new(f64::NAN).is_none());
    }

    #[test]
    fn slots_are_spaced_across_threads() {
        let rl = Arc::new(RateLimiter::new(1000.0).unwrap());
        let stamps = Arc::new(Mutex::new(Vec::new()));
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let (rl, stamps) = (rl.clone(), stamps.clone());
                std::thread::spawn(move || {
                    for _ in 0..25 {
                        rl.acquire();
                        stamps.lock().unwrap().push(Instant::now());
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let mut s = stamps.lock().unwrap().clone();
        s.sort();
        let span = *s.last().unwrap() - s[0];
        // 100 slots at ~1.05 ms need at least 99 intervals.
        assert!(span >= rl.interval() * 98, "{span:?}");
    }
}
