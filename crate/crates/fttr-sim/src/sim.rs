//! Deterministic discrete-event kernel: virtual clock, priority event queue,
//! seeded per-component random streams.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Sub};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Integer nanoseconds since simulation start. No floating-point clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn from_ns(ns: u64) -> Self {
        SimTime(ns)
    }
    pub fn from_us(us: u64) -> Self {
        SimTime(us * 1_000)
    }
    pub fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000_000)
    }
    pub fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000_000)
    }
    /// Rounds to the nearest nanosecond; negative durations clamp to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e9).max(0.0).round() as u64)
    }
    pub fn as_ns(self) -> u64 {
        self.0
    }
    pub fn as_ms_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }
    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }
    pub fn saturating_sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 + rhs.0)
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 += rhs.0;
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(self.0 - rhs.0)
    }
}

impl Mul<u64> for SimTime {
    type Output = SimTime;
    fn mul(self, rhs: u64) -> SimTime {
        SimTime(self.0 * rhs)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Time needed to serialize `bits` on a link of `rate_bps`, rounded up to
/// whole nanoseconds so that back-to-back packing never overlaps.
pub fn tx_time(bits: u64, rate_bps: u64) -> SimTime {
    assert!(rate_bps > 0);
    // ceil(bits * 1e9 / rate)
    let ns = (bits as u128 * 1_000_000_000u128).div_ceil(rate_bps as u128);
    SimTime(ns as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("cannot schedule event at {requested} before current time {now}")]
pub struct SchedulePastError {
    pub requested: SimTime,
    pub now: SimTime,
}

struct QueuedEvent<P> {
    fire_at: SimTime,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for QueuedEvent<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.fire_at, self.seq) == (other.fire_at, other.seq)
    }
}
impl<P> Eq for QueuedEvent<P> {}
impl<P> PartialOrd for QueuedEvent<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for QueuedEvent<P> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.fire_at, self.seq).cmp(&(other.fire_at, other.seq))
    }
}

/// Event queue with a strict (fire_at, seq) total order. `seq` is an
/// insertion counter, so ties fire in scheduling order on every platform.
pub struct Kernel<P> {
    now: SimTime,
    seq: u64,
    heap: BinaryHeap<Reverse<QueuedEvent<P>>>,
    cancelled: HashSet<u64>,
    seed: u64,
}

impl<P> Kernel<P> {
    pub fn new(seed: u64) -> Self {
        Kernel {
            now: SimTime::ZERO,
            seq: 0,
            heap: BinaryHeap::new(),
            cancelled: HashSet::new(),
            seed,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn schedule(&mut self, t: SimTime, payload: P) -> Result<EventHandle, SchedulePastError> {
        if t < self.now {
            return Err(SchedulePastError {
                requested: t,
                now: self.now,
            });
        }
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(QueuedEvent {
            fire_at: t,
            seq,
            payload,
        }));
        Ok(EventHandle(seq))
    }

    /// Cancels a pending event. Returns false if it already fired (or was
    /// already cancelled).
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.cancelled.insert(handle.0)
    }

    /// Pops the next event with fire_at <= t_end, advancing the clock to it.
    /// If none remains, the clock advances to t_end and None is returned.
    pub fn pop_next(&mut self, t_end: SimTime) -> Option<(SimTime, u64, P)> {
        while let Some(Reverse(ev)) = self.heap.peek() {
            if ev.fire_at > t_end {
                break;
            }
            let Reverse(ev) = self.heap.pop().unwrap();
            if self.cancelled.remove(&ev.seq) {
                continue;
            }
            debug_assert!(ev.fire_at >= self.now);
            self.now = ev.fire_at;
            return Some((ev.fire_at, ev.seq, ev.payload));
        }
        if t_end > self.now {
            self.now = t_end;
        }
        None
    }

    /// Processes all events with fire_at <= t_end through `handler`,
    /// returning the number processed. Handlers may schedule further events.
    pub fn run_until(&mut self, t_end: SimTime, mut handler: impl FnMut(&mut Self, SimTime, P)) -> usize {
        assert!(t_end >= self.now, "run_until into the past");
        let mut count = 0;
        while let Some((t, _seq, payload)) = self.pop_next(t_end) {
            handler(self, t, payload);
            count += 1;
        }
        count
    }

    /// Independent random stream derived from (global seed, stream_id).
    /// Same pair always yields the identical sample sequence.
    pub fn rng(&self, stream_id: &str) -> ChaCha8Rng {
        derive_rng(self.seed, stream_id)
    }
}

pub fn derive_rng(seed: u64, stream_id: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(stream_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
