use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
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

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Virtual clock: `sleep` advances time instantly.
#[derive(Debug, Default)]
pub struct MockClock {
    now: Mutex<Duration>,
    slept: Mutex<Vec<Duration>>,
}

impl MockClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }

    /// Every sleep requested so far, in order.
    pub fn sleeps(&self) -> Vec<Duration> {
        self.slept.lock().unwrap().clone()
    }
}

impl Clock for MockClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.slept.lock().unwrap().push(d);
        self.advance(d);
    }
}

const WINDOW: Duration = Duration::from_secs(1);

/// Sliding-window limiter: at most `per_second` dispatches in any one-second
/// window. Callers block in [`RateLimiter::acquire`] until a slot frees up.
pub struct RateLimiter {
    per_second: u32,
    clock: Arc<dyn Clock>,
    recent: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn new(per_second: u32, clock: Arc<dyn Clock>) -> Self {
        assert!(per_second >= 1, "rate limit must allow at least one request per second");
        Self {
            per_second,
            clock,
            recent: Mutex::new(VecDeque::with_capacity(per_second as usize)),
        }
    }

    pub fn per_second(per_second: u32) -> Self {
        Self::new(per_second, Arc::new(SystemClock::default()))
    }

    /// Blocks until a dispatch is allowed; returns the dispatch time.
    pub fn acquire(&self) -> Duration {
        let mut recent = self.recent.lock().unwrap();
        loop {
            let now = self.clock.now();
            while recent.front().is_some_and(|&t| now.saturating_sub(t) >= WINDOW) {
                recent.pop_front();
            }
            if recent.len() < self.per_second as usize {
                recent.push_back(now);
                return now;
            }
            let oldest = *recent.front().expect("window is full");
            self.clock.sleep((oldest + WINDOW).saturating_sub(now));
        }
    }
}
