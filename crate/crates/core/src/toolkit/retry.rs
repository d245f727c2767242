//! Backoff schedule, injectable clock and a token-bucket rate limiter.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hashing::{seed_from, StableHasher};

/// Exponential backoff: attempt `n` (1-based) waits
/// `min(max_delay, base_delay * multiplier^(n-1))`, reduced by up to `jitter` of itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub multiplier: f64,
    /// Fraction in [0, 1].
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { base_delay_ms: 500, max_delay_ms: 30_000, multiplier: 2.0, jitter: 0.25 }
    }
}

impl RetryPolicy {
    pub fn nominal_delay(&self, attempt: u32) -> Duration {
        let exp = self.multiplier.powi(attempt.saturating_sub(1) as i32);
        let ms = (self.base_delay_ms as f64 * exp).min(self.max_delay_ms as f64);
        Duration::from_secs_f64(ms.max(0.0) / 1000.0)
    }

    /// Jittered delay, deterministic in `(key, attempt)`.
    pub fn delay(&self, attempt: u32, key: &str) -> Duration {
        let mut h = StableHasher::new();
        h.str("backoff").str(key).u64(attempt as u64);
        let u: f64 = ChaCha8Rng::seed_from_u64(seed_from(&h)).random();
        self.nominal_delay(attempt).mul_f64(1.0 - self.jitter.clamp(0.0, 1.0) * u)
    }
}

pub trait Clock: Send + Sync {
    /// Monotonic time since an arbitrary origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
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

/// Virtual clock: sleeping advances time instantly and is recorded.
#[derive(Default)]
pub struct ManualClock {
    state: Mutex<(Duration, Vec<Duration>)>,
}

impl ManualClock {
    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().expect("clock lock").1.clone()
    }

    pub fn advance(&self, d: Duration) {
        self.state.lock().expect("clock lock").0 += d;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        self.state.lock().expect("clock lock").0
    }

    fn sleep(&self, d: Duration) {
        let mut s = self.state.lock().expect("clock lock");
        s.0 += d;
        s.1.push(d);
    }
}

/// Token bucket refilled at `requests_per_minute`, holding at most `burst` tokens.
pub struct RateLimiter {
    requests_per_minute: f64,
    burst: f64,
    state: Mutex<(f64, Duration)>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: f64, burst: u32, clock: &dyn Clock) -> Self {
        let burst = burst.max(1) as f64;
        Self { requests_per_minute, burst, state: Mutex::new((burst, clock.now())) }
    }

    /// Blocks (through `clock`) until a token is available, then takes it.
    /// Holding the lock while waiting serializes dispatch.
    pub fn acquire(&self, clock: &dyn Clock) {
        if self.requests_per_minute <= 0.0 {
            return;
        }
        let per_sec = self.requests_per_minute / 60.0;
        let mut s = self.state.lock().expect("limiter lock");
        let now = clock.now();
        let elapsed = now.saturating_sub(s.1).as_secs_f64();
        s.0 = (s.0 + elapsed * per_sec).min(self.burst);
        s.1 = now;
        if s.0 < 1.0 {
            let wait = Duration::from_secs_f64((1.0 - s.0) / per_sec);
            clock.sleep(wait);
            s.0 = 1.0;
            s.1 = clock.now();
        }
        s.0 -= 1.0;
    }
}
