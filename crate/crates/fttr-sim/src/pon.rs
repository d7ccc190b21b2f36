//! Cascaded TDM-PON model: polling-cycle report/grant exchange, ONU queues,
//! the limited-service scheduler (LS-DBA) and the predictive scheduler
//! (Pred-DBA) with a sliding-window predictor.

use std::collections::VecDeque;

use crate::sim::{tx_time, SimTime};
use crate::traffic::XrFrame;

/// Fiber propagation: 5 ns per meter (5 us/km).
pub const FIBER_NS_PER_M: u64 = 5;

/// Frames are split into 9000-byte segments at the SF.
pub const SEGMENT_BITS: u64 = 9_000 * 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PonSegment {
    pub capacity_bps: u64,
    pub length_m: u64,
    pub guard_time: SimTime,
    pub max_cycle: SimTime,
    pub onu_ids: Vec<u32>,
}

impl PonSegment {
    pub fn prop_delay(&self) -> SimTime {
        SimTime(self.length_m * FIBER_NS_PER_M)
    }

    /// Default per-cycle grant cap: the per-ONU fair share of one cycle at
    /// segment capacity, after guard slots.
    pub fn default_b_max_bits(&self) -> u64 {
        let n = self.onu_ids.len() as u64;
        if n == 0 {
            return 0;
        }
        let usable = self.max_cycle.as_ns().saturating_sub(n * self.guard_time.as_ns());
        (usable as u128 * self.capacity_bps as u128 / 1_000_000_000 / n as u128) as u64
    }

    /// Rejects configurations whose worst case cannot fit one cycle.
    pub fn validate_b_max(&self, b_max_bits: u64) -> Result<(), DbaConfigError> {
        let n = self.onu_ids.len() as u64;
        let worst = n as u128 * (tx_time(b_max_bits, self.capacity_bps).as_ns() as u128 + self.guard_time.as_ns() as u128);
        if worst > self.max_cycle.as_ns() as u128 {
            return Err(DbaConfigError {
                onus: n,
                b_max_bits,
                max_cycle: self.max_cycle,
            });
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("{onus} ONUs with b_max {b_max_bits} bits plus guards cannot fit a {max_cycle} cycle")]
pub struct DbaConfigError {
    pub onus: u64,
    pub b_max_bits: u64,
    pub max_cycle: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Report {
    pub onu_id: u32,
    pub queued_bits: u64,
    pub sent_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grant {
    pub onu_id: u32,
    pub start: SimTime,
    pub duration: SimTime,
    pub granted_bits: u64,
}

impl Grant {
    pub fn end(&self) -> SimTime {
        self.start + self.duration
    }
}

/// One queued frame segment at an SF.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSegment {
    pub stream_id: u32,
    pub frame_id: u64,
    pub remaining_bits: u64,
    pub enqueue_time: SimTime,
    /// True on the last segment of its frame.
    pub frame_tail: bool,
}

#[derive(Debug)]
pub struct OnuQueue {
    pub onu_id: u32,
    fifo: VecDeque<FrameSegment>,
    depth_bits: u64,
    pub capacity_bits: u64,
    pub overflow_drops: u64,
}

impl OnuQueue {
    pub fn new(onu_id: u32, capacity_bits: u64) -> Self {
        OnuQueue {
            onu_id,
            fifo: VecDeque::new(),
            depth_bits: 0,
            capacity_bits,
            overflow_drops: 0,
        }
    }

    pub fn depth_bits(&self) -> u64 {
        self.depth_bits
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn front(&self) -> Option<&FrameSegment> {
        self.fifo.front()
    }

    /// Appends a segment if it fits; a full queue rejects it and counts an
    /// overflow drop.
    pub fn enqueue(&mut self, seg: FrameSegment) -> bool {
        if self.depth_bits + seg.remaining_bits > self.capacity_bits {
            self.overflow_drops += 1;
            return false;
        }
        self.depth_bits += seg.remaining_bits;
        self.fifo.push_back(seg);
        true
    }

    /// Splits `frame` into segments and enqueues them. Returns the number
    /// of segments accepted; stops at the first rejection so a partially
    /// admitted frame never reorders later traffic.
    pub fn enqueue_frame(&mut self, frame: &XrFrame, now: SimTime) -> (usize, usize) {
        let mut remaining = frame.size_bits;
        let mut accepted = 0;
        let mut total = 0;
        while remaining > 0 {
            let bits = remaining.min(SEGMENT_BITS);
            remaining -= bits;
            total += 1;
            let seg = FrameSegment {
                stream_id: frame.stream_id,
                frame_id: frame.frame_id,
                remaining_bits: bits,
                enqueue_time: now,
                frame_tail: remaining == 0,
            };
            if accepted == total - 1 && self.enqueue(seg) {
                accepted += 1;
            }
        }
        (accepted, total)
    }

    /// Serves one grant FIFO: dequeues whole or partial segments until the
    /// granted bits run out. Returns (segment, bits_sent, depart_time) with
    /// departures packed back to back inside the grant window.
    pub fn transmit(&mut self, grant: &Grant, capacity_bps: u64) -> Vec<(FrameSegment, u64, SimTime)> {
        assert_eq!(grant.onu_id, self.onu_id);
        let mut out = vec![];
        let mut budget = grant.granted_bits;
        let mut cursor = grant.start;
        while budget > 0 {
            let Some(head) = self.fifo.front_mut() else { break };
            // a bit cannot leave before it physically arrived; anything still
            // in flight toward this queue waits for a later grant
            if head.enqueue_time > cursor {
                break;
            }
            let bits = head.remaining_bits.min(budget);
            head.remaining_bits -= bits;
            budget -= bits;
            self.depth_bits -= bits;
            let done = head.remaining_bits == 0;
            let seg = if done {
                self.fifo.pop_front().unwrap()
            } else {
                *self.fifo.front().unwrap()
            };
            cursor = cursor + tx_time(bits, capacity_bps);
            // per-piece ceil rounding can spill ~1 ns per served piece past
            // the nominal grant end; that stays far inside the guard time
            debug_assert!(
                cursor <= grant.end() + SimTime(out.len() as u64 + 1),
                "cursor {cursor} grant {grant:?} bits {bits}"
            );
            out.push((seg, bits, cursor));
        }
        out
    }
}

/// Sliding-window (size W) mean predictor over observed (size, gap) pairs.
#[derive(Debug, Clone)]
pub struct PredictionRecord {
    pub stream_id: u32,
    pub window: VecDeque<(u64, SimTime)>,
    pub window_cap: usize,
    pub last_arrival: SimTime,
    pub predicted_size_bits: u64,
    pub predicted_arrival: SimTime,
    observed_any: bool,
}

impl PredictionRecord {
    pub fn new(stream_id: u32, window_cap: usize) -> Self {
        assert!(window_cap >= 1);
        PredictionRecord {
            stream_id,
            window: VecDeque::new(),
            window_cap,
            last_arrival: SimTime::ZERO,
            predicted_size_bits: 0,
            predicted_arrival: SimTime::ZERO,
            observed_any: false,
        }
    }

    pub fn has_history(&self) -> bool {
        self.observed_any
    }

    /// Feeds one observed arrival: the window shifts FIFO (max W) and the
    /// prediction becomes the windowed means, anchored at this arrival.
    pub fn observe(&mut self, size_bits: u64, arrived_at: SimTime) {
        let gap = if self.observed_any {
            arrived_at.saturating_sub(self.last_arrival)
        } else {
            SimTime::ZERO
        };
        if self.observed_any {
            if self.window.len() == self.window_cap {
                self.window.pop_front();
            }
            self.window.push_back((size_bits, gap));
        } else {
            self.window.push_back((size_bits, SimTime::ZERO));
        }
        self.observed_any = true;
        self.last_arrival = arrived_at;
        let n = self.window.len() as u64;
        let size_sum: u64 = self.window.iter().map(|(s, _)| s).sum();
        self.predicted_size_bits = size_sum / n;
        let gaps: Vec<SimTime> = self
            .window
            .iter()
            .filter(|(_, g)| *g > SimTime::ZERO)
            .map(|(_, g)| *g)
            .collect();
        let mean_gap = if gaps.is_empty() {
            SimTime::ZERO
        } else {
            SimTime(gaps.iter().map(|g| g.as_ns()).sum::<u64>() / gaps.len() as u64)
        };
        self.predicted_arrival = arrived_at + mean_gap;
    }
}

/// Per-op view of predict_next: returns the updated record.
pub fn predict_next(mut rec: PredictionRecord, observed: &XrFrame, arrived_at: SimTime) -> PredictionRecord {
    assert_eq!(rec.stream_id, observed.stream_id);
    rec.observe(observed.size_bits, arrived_at);
    rec
}

/// Limited-service DBA: grant = min(reported, b_max), packed in ONU-id
/// order from `cycle_start` with a trailing guard per grant. Zero reports
/// still get a (zero-length) polling slot.
pub fn ls_dba(reports: &[Report], seg: &PonSegment, b_max_bits: u64, cycle_start: SimTime) -> Vec<Grant> {
    let mut sorted: Vec<&Report> = reports.iter().collect();
    sorted.sort_by_key(|r| r.onu_id);
    let mut cursor = cycle_start;
    let mut grants = vec![];
    for r in sorted {
        let bits = r.queued_bits.min(b_max_bits);
        let duration = tx_time(bits, seg.capacity_bps);
        grants.push(Grant {
            onu_id: r.onu_id,
            start: cursor,
            duration,
            granted_bits: bits,
        });
        cursor = cursor + duration + seg.guard_time;
    }
    grants
}

/// Per-ONU demand visible to the predictive scheduler for one cycle.
#[derive(Debug, Clone)]
pub struct PredDemand {
    pub onu_id: u32,
    /// Known backlog (relayed over the control interface, not the in-band
    /// report slot).
    pub backlog_bits: u64,
    /// Earliest predicted arrival among streams due by the cycle end, if any.
    pub predicted_arrival: Option<SimTime>,
    /// Sum of predicted sizes of the due streams.
    pub predicted_bits: u64,
    /// True when no stream of this ONU has any history yet.
    pub no_history: bool,
}

/// Predictive DBA for one cycle [cycle_start, cycle_start + max_cycle).
///
/// Each ONU gets one grant covering its known backlog plus the predicted
/// sizes of streams due this cycle, inflated by `margin`. Grant starts are
/// aligned to the predicted arrival when there is no backlog to serve
/// first. ONUs without any prediction history fall back to the limited
/// service rule. When the aggregate demand exceeds one cycle of capacity,
/// every ONU's grant shrinks proportionally so no ONU starves. Grants are
/// clipped at the cycle end; the remainder reappears as backlog next cycle.
pub fn pred_dba(
    demands: &[PredDemand],
    seg: &PonSegment,
    margin: f64,
    b_max_bits: u64,
    cycle_start: SimTime,
) -> Vec<Grant> {
    let cycle_end = cycle_start + seg.max_cycle;
    // earliest constraint first, ONU id as tie-break, so aligned grants
    // actually land near their predicted arrivals
    let mut order: Vec<(SimTime, u32, usize)> = demands
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let constraint = if d.backlog_bits > 0 {
                cycle_start
            } else {
                d.predicted_arrival.unwrap_or(cycle_start).max(cycle_start)
            };
            (constraint, d.onu_id, i)
        })
        .collect();
    order.sort();
    let desired: Vec<u64> = demands
        .iter()
        .map(|d| {
            if d.no_history {
                d.backlog_bits.min(b_max_bits)
            } else {
                d.backlog_bits + (d.predicted_bits as f64 * (1.0 + margin)).ceil() as u64
            }
        })
        .collect();
    let active = desired.iter().filter(|&&b| b > 0).count() as u64;
    let usable_ns = seg
        .max_cycle
        .as_ns()
        .saturating_sub(active * seg.guard_time.as_ns());
    let budget = usable_ns as u128 * seg.capacity_bps as u128 / 1_000_000_000;
    let total: u128 = desired.iter().map(|&b| b as u128).sum();
    let mut grants = vec![];
    let mut cursor = cycle_start;
    for (constraint, _, i) in order {
        let d = &demands[i];
        let bits = if total > budget {
            (desired[i] as u128 * budget / total) as u64
        } else {
            desired[i]
        };
        let start = cursor.max(constraint);
        if start >= cycle_end {
            // no room left this cycle; backlog carries over
            continue;
        }
        let room = cycle_end - start;
        let max_bits = (room.as_ns() as u128 * seg.capacity_bps as u128 / 1_000_000_000) as u64;
        let bits = bits.min(max_bits);
        let duration = tx_time(bits, seg.capacity_bps);
        grants.push(Grant {
            onu_id: d.onu_id,
            start,
            duration,
            granted_bits: bits,
        });
        cursor = start + duration + seg.guard_time;
    }
    grants.sort_by_key(|g| (g.start, g.onu_id));
    grants
}

/// A hop of the delivery path for the lower-bound latency oracle.
#[derive(Debug, Clone, Copy)]
pub struct PathHop {
    pub rate_bps: u64,
    pub prop: SimTime,
}

/// Sum over hops of propagation plus serialization, ignoring queuing and
/// cycle alignment. Every measured latency must sit at or above this.
pub fn min_path_latency(path: &[PathHop], frame_bits: u64) -> SimTime {
    assert!(!path.is_empty());
    let mut total = SimTime::ZERO;
    for hop in path {
        total = total + hop.prop + tx_time(frame_bits, hop.rate_bps);
    }
    total
}
