use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Time source for the limiter and retry backoff.
pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

/// Manually advanced clock; `sleep` moves time forward instantly.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
    slept: Mutex<Vec<Duration>>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, by: Duration) {
        *self.now.lock().expect("clock lock") += by;
    }

    /// Every duration passed to `sleep`, in call order.
    pub fn sleeps(&self) -> Vec<Duration> {
        self.slept.lock().expect("clock lock").clone()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("clock lock")
    }

    fn sleep(&self, duration: Duration) {
        self.slept.lock().expect("clock lock").push(duration);
        *self.now.lock().expect("clock lock") += duration;
        std::thread::yield_now();
    }
}

/// Sliding-window limiter: at most `per_window` grants in any window of
/// length `window`, shared by all callers.
pub struct RateLimiter {
    per_window: usize,
    window: Duration,
    grants: Mutex<VecDeque<Duration>>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for RateLimiter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RateLimiter")
            .field("per_window", &self.per_window)
            .field("window", &self.window)
            .finish()
    }
}

impl RateLimiter {
    pub fn per_minute(requests_per_minute: u32, clock: Arc<dyn Clock>) -> Self {
        Self::new(requests_per_minute.max(1) as usize, Duration::from_secs(60), clock)
    }

    pub fn new(per_window: usize, window: Duration, clock: Arc<dyn Clock>) -> Self {
        Self {
            per_window: per_window.max(1),
            window,
            grants: Mutex::new(VecDeque::new()),
            clock,
        }
    }

    /// Blocks until a slot is free; returns the grant time.
    pub fn acquire(&self) -> Duration {
        loop {
            let wait = {
                let mut grants = self.grants.lock().expect("limiter lock");
                let now = self.clock.now();
                while grants.front().is_some_and(|&t| t + self.window <= now) {
                    grants.pop_front();
                }
                if grants.len() < self.per_window {
                    grants.push_back(now);
                    return now;
                }
                let oldest = *grants.front().expect("full window is non-empty");
                oldest + self.window - now
            };
            self.clock.sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_window_respected(mut grants: Vec<Duration>, per_window: usize, window: Duration) {
        grants.sort();
        for pair in grants.windows(per_window + 1) {
            assert!(
                pair[per_window] - pair[0] >= window,
                "{} grants within {:?}",
                per_window + 1,
                pair[per_window] - pair[0]
            );
        }
    }

    #[test]
    fn sequential_grants_spread_over_windows() {
        let clock = Arc::new(VirtualClock::new());
        let limiter = RateLimiter::per_minute(3, clock.clone());
        let grants: Vec<_> = (0..7).map(|_| limiter.acquire()).collect();
        assert_eq!(grants[..3], [Duration::ZERO; 3]);
        assert_eq!(grants[3], Duration::from_secs(60));
        assert_eq!(grants[6], Duration::from_secs(120));
        assert_window_respected(grants, 3, Duration::from_secs(60));
    }

    #[test]
    fn concurrent_callers_never_exceed_rate() {
        let clock = Arc::new(VirtualClock::new());
        let limiter = Arc::new(RateLimiter::per_minute(5, clock.clone()));
        let grants = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    for _ in 0..6 {
                        let t = limiter.acquire();
                        grants.lock().unwrap().push(t);
                        clock.advance(Duration::from_millis(700));
                    }
                });
            }
        });
        let grants = grants.into_inner().unwrap();
        assert_eq!(grants.len(), 48);
        assert_window_respected(grants, 5, Duration::from_secs(60));
    }
}
