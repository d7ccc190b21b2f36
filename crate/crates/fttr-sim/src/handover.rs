//! QoE-triggered seamless handover: trigger evaluation over rolling STA
//! stats, neighbor-power sensing, target selection with hysteresis and
//! bandwidth headroom, and the phase machine driving the switch.

use std::collections::VecDeque;

use crate::metrics::{jitter, QoeRequirements};
use crate::sim::SimTime;
use crate::wifi::{rssi_dbm, WifiParams};

#[derive(Debug, Clone, PartialEq)]
pub struct HandoverPolicy {
    pub qoe: QoeRequirements,
    /// Rolling latency window, in frames.
    pub stats_window: usize,
    /// RU-demand trend window, in samples.
    pub ru_trend_window: usize,
    /// MCS at or below this index counts as low-order modulation.
    pub low_mcs_threshold: u8,
    pub hysteresis_db: f64,
    pub min_available_bps: u64,
    pub cooldown: SimTime,
    /// Control-message round trip for neighbor sensing.
    pub sensing_delay: SimTime,
}

impl Default for HandoverPolicy {
    fn default() -> Self {
        HandoverPolicy {
            qoe: QoeRequirements::default(),
            stats_window: 32,
            ru_trend_window: 64,
            low_mcs_threshold: 2,
            hysteresis_db: 6.0,
            min_available_bps: 0,
            cooldown: SimTime::from_ms(500),
            sensing_delay: SimTime::from_ms(2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandoverPhase {
    Monitoring,
    SensingRequested,
    ReportReceived,
    TargetSelected,
    PathPreEstablished,
    Switching,
}

impl HandoverPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            HandoverPhase::Monitoring => "monitoring",
            HandoverPhase::SensingRequested => "sensing_requested",
            HandoverPhase::ReportReceived => "report_received",
            HandoverPhase::TargetSelected => "target_selected",
            HandoverPhase::PathPreEstablished => "path_pre_established",
            HandoverPhase::Switching => "switching",
        }
    }

    /// Transitions only along the listed order, then back to Monitoring.
    pub fn next(self) -> HandoverPhase {
        match self {
            HandoverPhase::Monitoring => HandoverPhase::SensingRequested,
            HandoverPhase::SensingRequested => HandoverPhase::ReportReceived,
            HandoverPhase::ReportReceived => HandoverPhase::TargetSelected,
            HandoverPhase::TargetSelected => HandoverPhase::PathPreEstablished,
            HandoverPhase::PathPreEstablished => HandoverPhase::Switching,
            HandoverPhase::Switching => HandoverPhase::Monitoring,
        }
    }
}

/// Rolling per-STA observables feeding the trigger.
#[derive(Debug, Clone)]
pub struct StaQoeStats {
    latencies: VecDeque<SimTime>,
    ru_samples: VecDeque<u32>,
    window: usize,
    ru_window: usize,
}

impl StaQoeStats {
    pub fn new(window: usize, ru_window: usize) -> Self {
        StaQoeStats {
            latencies: VecDeque::new(),
            ru_samples: VecDeque::new(),
            window,
            ru_window,
        }
    }

    pub fn push_latency(&mut self, lat: SimTime) {
        if self.latencies.len() == self.window {
            self.latencies.pop_front();
        }
        self.latencies.push_back(lat);
    }

    pub fn push_ru_demand(&mut self, ru: u32) {
        if self.ru_samples.len() == self.ru_window {
            self.ru_samples.pop_front();
        }
        self.ru_samples.push_back(ru);
    }

    pub fn window_full(&self) -> bool {
        self.latencies.len() >= self.window
    }

    pub fn mean_latency(&self) -> SimTime {
        if self.latencies.is_empty() {
            return SimTime::ZERO;
        }
        SimTime(self.latencies.iter().map(|t| t.as_ns()).sum::<u64>() / self.latencies.len() as u64)
    }

    pub fn jitter(&self) -> SimTime {
        let v: Vec<SimTime> = self.latencies.iter().copied().collect();
        jitter(&v).0
    }

    /// True when RU demand rose across the trend window.
    pub fn ru_demand_rising(&self) -> bool {
        match (self.ru_samples.front(), self.ru_samples.back()) {
            (Some(&first), Some(&last)) => last > first,
            _ => false,
        }
    }
}

/// Trigger rule: (QoE breach) AND (RU demand increasing) AND (low MCS),
/// outside the cooldown. False whenever both QoE bounds hold.
pub fn evaluate_trigger(
    stats: &StaQoeStats,
    mcs_index: Option<u8>,
    policy: &HandoverPolicy,
    now: SimTime,
    cooldown_until: SimTime,
) -> bool {
    if now < cooldown_until || !stats.window_full() {
        return false;
    }
    let qoe_breach =
        stats.mean_latency() > policy.qoe.max_latency || stats.jitter() > policy.qoe.max_jitter;
    if !qoe_breach {
        return false;
    }
    let low_mcs = match mcs_index {
        Some(idx) => idx <= policy.low_mcs_threshold,
        None => true, // link-down is as low as modulation gets
    };
    qoe_breach && stats.ru_demand_rising() && low_mcs
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensingReport {
    pub sta_id: u32,
    /// (wap_id, rssi_dbm), one entry per WAP, current WAP included.
    pub entries: Vec<(u32, f64)>,
    pub measured_at: SimTime,
}

/// Builds the neighbor-power report from the same path-loss model the data
/// plane uses: rssi = tx_power - path_loss(distance, walls).
pub fn build_sensing_report(
    sta_id: u32,
    waps: &[(u32, f64, u32)], // (wap_id, distance_m, walls)
    params: &WifiParams,
    now: SimTime,
) -> SensingReport {
    SensingReport {
        sta_id,
        entries: waps
            .iter()
            .map(|&(wap_id, d, walls)| (wap_id, rssi_dbm(params, d, walls)))
            .collect(),
        measured_at: now,
    }
}

/// Candidate set: WAPs beating the current RSSI by the hysteresis margin
/// with enough uncommitted capacity. Highest RSSI wins; ties break to the
/// lower committed load, then the lower wap_id.
pub fn select_target(
    report: &SensingReport,
    current_wap: u32,
    wap_headroom: &[(u32, u64)], // (wap_id, available_bps)
    stream_bps: u64,
    policy: &HandoverPolicy,
) -> Option<u32> {
    let current_rssi = report
        .entries
        .iter()
        .find(|(id, _)| *id == current_wap)
        .map(|(_, r)| *r)?;
    let need = stream_bps.max(policy.min_available_bps);
    let mut candidates: Vec<(u32, f64, u64)> = vec![];
    for &(wap_id, rssi) in &report.entries {
        if wap_id == current_wap {
            continue;
        }
        let Some(&(_, avail)) = wap_headroom.iter().find(|(id, _)| *id == wap_id) else {
            continue;
        };
        if rssi >= current_rssi + policy.hysteresis_db && avail >= need {
            candidates.push((wap_id, rssi, avail));
        }
    }
    candidates
        .into_iter()
        .max_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap()
                .then(a.2.cmp(&b.2)) // higher headroom = lower committed load
                .then(b.0.cmp(&a.0)) // then lower wap id
        })
        .map(|(id, _, _)| id)
}

/// Per-STA handover controller state (one in-flight handover max).
#[derive(Debug, Clone)]
pub struct HandoverState {
    pub phase: HandoverPhase,
    pub phase_entered_at: SimTime,
    pub cooldown_until: SimTime,
    pub target_wap: Option<u32>,
    pub completed_count: u64,
}

impl HandoverState {
    pub fn new() -> Self {
        HandoverState {
            phase: HandoverPhase::Monitoring,
            phase_entered_at: SimTime::ZERO,
            cooldown_until: SimTime::ZERO,
            target_wap: None,
            completed_count: 0,
        }
    }

    pub fn advance(&mut self, now: SimTime) {
        self.phase = self.phase.next();
        self.phase_entered_at = now;
    }

    /// Aborts back to Monitoring and applies the cooldown.
    pub fn abort(&mut self, now: SimTime, cooldown: SimTime) {
        self.phase = HandoverPhase::Monitoring;
        self.phase_entered_at = now;
        self.cooldown_until = now + cooldown;
        self.target_wap = None;
    }

    pub fn complete(&mut self, now: SimTime, cooldown: SimTime) {
        assert_eq!(self.phase, HandoverPhase::Switching);
        self.phase = HandoverPhase::Monitoring;
        self.phase_entered_at = now;
        self.cooldown_until = now + cooldown;
        self.target_wap = None;
        self.completed_count += 1;
    }
}

impl Default for HandoverState {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_stats(lat_ms: u64, ru: &[u32]) -> StaQoeStats {
        let mut s = StaQoeStats::new(32, 64);
        for _ in 0..32 {
            s.push_latency(SimTime::from_ms(lat_ms));
        }
        for &r in ru {
            s.push_ru_demand(r);
        }
        s
    }

    #[test]
    fn trigger_false_when_healthy() {
        let policy = HandoverPolicy::default();
        let stats = full_stats(0, &[1, 2, 3]);
        assert!(!evaluate_trigger(&stats, Some(11), &policy, SimTime::from_secs(1), SimTime::ZERO));
    }

    #[test]
    fn trigger_fires_on_conjunction() {
        let policy = HandoverPolicy::default();
        // mean 25 ms > 20 ms bound, rising RU, MCS 1
        let stats = full_stats(25, &[4, 6, 9]);
        assert!(evaluate_trigger(&stats, Some(1), &policy, SimTime::from_secs(1), SimTime::ZERO));
    }

    #[test]
    fn trigger_blocked_by_high_mcs() {
        let policy = HandoverPolicy::default();
        let stats = full_stats(25, &[4, 6, 9]);
        assert!(!evaluate_trigger(&stats, Some(11), &policy, SimTime::from_secs(1), SimTime::ZERO));
    }

    #[test]
    fn trigger_blocked_by_flat_ru() {
        let policy = HandoverPolicy::default();
        let stats = full_stats(25, &[5, 5, 5]);
        assert!(!evaluate_trigger(&stats, Some(1), &policy, SimTime::from_secs(1), SimTime::ZERO));
    }

    #[test]
    fn trigger_respects_cooldown_and_window() {
        let policy = HandoverPolicy::default();
        let stats = full_stats(25, &[4, 9]);
        assert!(!evaluate_trigger(&stats, Some(1), &policy, SimTime::from_ms(100), SimTime::from_ms(200)));
        let mut partial = StaQoeStats::new(32, 64);
        partial.push_latency(SimTime::from_ms(25));
        partial.push_ru_demand(4);
        partial.push_ru_demand(9);
        assert!(!evaluate_trigger(&partial, Some(1), &policy, SimTime::from_secs(1), SimTime::ZERO));
    }

    #[test]
    fn trigger_sound_within_bounds() {
        // never true while both QoE bounds hold, whatever the other signals
        let policy = HandoverPolicy::default();
        for lat in [0u64, 5, 10, 20] {
            let stats = full_stats(lat, &[1, 100]);
            assert!(!evaluate_trigger(&stats, Some(0), &policy, SimTime::from_secs(1), SimTime::ZERO));
        }
    }

    #[test]
    fn sensing_report_reference_values() {
        let params = WifiParams::default();
        let report = build_sensing_report(0, &[(0, 1.0, 0), (1, 19.0, 1)], &params, SimTime::ZERO);
        assert!((report.entries[0].1 - -28.4).abs() < 0.01);
        let expected_b = 18.0 - (46.4 + 30.0 * 19f64.log10() + 10.0);
        assert!((report.entries[1].1 - expected_b).abs() < 1e-9);
        assert!((report.entries[1].1 - -76.7).abs() < 0.1);
    }

    #[test]
    fn sensing_symmetric_distances_equal_rssi() {
        let params = WifiParams::default();
        let report = build_sensing_report(0, &[(0, 7.0, 1), (1, 7.0, 1)], &params, SimTime::ZERO);
        assert_eq!(report.entries[0].1, report.entries[1].1);
    }

    #[test]
    fn select_none_without_hysteresis_margin() {
        let policy = HandoverPolicy::default();
        let report = SensingReport {
            sta_id: 0,
            entries: vec![(0, -60.0), (1, -57.0)], // only 3 dB better
            measured_at: SimTime::ZERO,
        };
        assert_eq!(select_target(&report, 0, &[(1, 1 << 40)], 1_000_000, &policy), None);
    }

    #[test]
    fn select_highest_rssi() {
        let policy = HandoverPolicy::default();
        let report = SensingReport {
            sta_id: 0,
            entries: vec![(0, -80.0), (1, -50.0), (2, -60.0)],
            measured_at: SimTime::ZERO,
        };
        let headroom = [(1, 1u64 << 40), (2, 1u64 << 40)];
        assert_eq!(select_target(&report, 0, &headroom, 1_000_000, &policy), Some(1));
    }

    #[test]
    fn select_skips_candidate_without_headroom() {
        let policy = HandoverPolicy::default();
        let report = SensingReport {
            sta_id: 0,
            entries: vec![(0, -80.0), (1, -50.0), (2, -60.0)],
            measured_at: SimTime::ZERO,
        };
        // best-RSSI WAP lacks headroom for a 360 Mbps stream
        let headroom = [(1, 100_000_000u64), (2, 1u64 << 40)];
        assert_eq!(select_target(&report, 0, &headroom, 360_000_000, &policy), Some(2));
    }

    #[test]
    fn phase_machine_walks_fixed_order() {
        let mut st = HandoverState::new();
        let order = [
            HandoverPhase::SensingRequested,
            HandoverPhase::ReportReceived,
            HandoverPhase::TargetSelected,
            HandoverPhase::PathPreEstablished,
            HandoverPhase::Switching,
        ];
        for expected in order {
            st.advance(SimTime::from_ms(1));
            assert_eq!(st.phase, expected);
        }
        st.complete(SimTime::from_ms(2), SimTime::from_ms(500));
        assert_eq!(st.phase, HandoverPhase::Monitoring);
        assert_eq!(st.completed_count, 1);
        assert_eq!(st.cooldown_until, SimTime::from_ms(502));
    }

    #[test]
    fn abort_returns_to_monitoring_with_cooldown() {
        let mut st = HandoverState::new();
        st.advance(SimTime::from_ms(1));
        st.abort(SimTime::from_ms(3), SimTime::from_ms(500));
        assert_eq!(st.phase, HandoverPhase::Monitoring);
        assert_eq!(st.cooldown_until, SimTime::from_ms(503));
        assert_eq!(st.completed_count, 0);
    }
}
