//! Exponential backoff and a blocking rate limiter.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::ProviderError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 5, base_delay_ms: 1_000, max_delay_ms: 30_000 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): `base * 2^retry`, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(63)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// retry budget runs out. `op` may suggest a minimum wait (e.g. from a
    /// `Retry-After` header) alongside its error.
    pub fn run<T>(
        &self,
        mut op: impl FnMut() -> Result<T, (ProviderError, Option<Duration>)>,
    ) -> Result<T, ProviderError> {
        let mut attempt = 0u32;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err((e, _)) if !e.is_retryable() => return Err(e),
                Err((e, hint)) => {
                    if attempt >= self.max_retries {
                        return Err(ProviderError::RetriesExhausted {
                            attempts: attempt + 1,
                            last_error: e.to_string(),
                        });
                    }
                    let wait = hint.map_or(self.delay(attempt), |h| h.max(self.delay(attempt)));
                    log::warn!("request failed ({e}); retrying in {wait:?}");
                    thread::sleep(wait);
                    attempt += 1;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateLimitConfig {
    pub max_in_flight: usize,
    /// 0 disables the per-minute bound.
    pub requests_per_minute: usize,
}

impl Default for RateLimitConfig {
    fn default() -> Self {
        RateLimitConfig { max_in_flight: 4, requests_per_minute: 60 }
    }
}

/// Bounds concurrent requests and request starts per window. Callers block
/// until a slot frees; nothing is ever rejected.
#[derive(Debug)]
pub struct RateLimiter {
    max_in_flight: usize,
    max_per_window: usize,
    window: Duration,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

#[derive(Debug, Default)]
struct LimiterState {
    in_flight: usize,
    starts: VecDeque<Instant>,
}

impl RateLimiter {
    pub fn new(max_in_flight: usize, max_per_window: usize, window: Duration) -> Self {
        RateLimiter {
            max_in_flight: max_in_flight.max(1),
            max_per_window,
            window,
            state: Mutex::new(LimiterState::default()),
            freed: Condvar::new(),
        }
    }

    pub fn from_config(cfg: &RateLimitConfig) -> Self {
        Self::new(cfg.max_in_flight, cfg.requests_per_minute, Duration::from_secs(60))
    }

    pub fn unlimited() -> Self {
        Self::new(usize::MAX, 0, Duration::from_secs(60))
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().expect("limiter lock");
        loop {
            let now = Instant::now();
            while st.starts.front().is_some_and(|t| now.duration_since(*t) >= self.window) {
                st.starts.pop_front();
            }
            let window_full = self.max_per_window > 0 && st.starts.len() >= self.max_per_window;
            if st.in_flight < self.max_in_flight && !window_full {
                st.in_flight += 1;
                if self.max_per_window > 0 {
                    st.starts.push_back(now);
                }
                return Permit { limiter: self };
            }
            st = if window_full {
                let oldest = *st.starts.front().expect("window full implies a start");
                let wait = (oldest + self.window).saturating_duration_since(now);
                self.freed.wait_timeout(st, wait).expect("limiter lock").0
            } else {
                self.freed.wait(st).expect("limiter lock")
            };
        }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().expect("limiter lock").in_flight
    }
}

/// Releases its in-flight slot on drop.
#[derive(Debug)]
pub struct Permit<'a> {
    limiter: &'a RateLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.limiter.state.lock().expect("limiter lock");
        st.in_flight -= 1;
        self.limiter.freed.notify_all();
    }
}
