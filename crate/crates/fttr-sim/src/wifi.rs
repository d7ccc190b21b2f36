//! WAP-STA wireless hop: log-distance path loss, SNR to MCS rate selection,
//! airtime, contention-free scheduled uplink, and an EDCA contention baseline.

use rand::Rng;

use crate::sim::{tx_time, SimTime};

#[derive(Debug, Clone, PartialEq)]
pub struct WifiParams {
    pub tx_power_dbm: f64,
    pub noise_floor_dbm: f64,
    pub channel_bandwidth_mhz: f64,
    pub per_ppdu_overhead: SimTime,
    pub max_aggregate_rate_bps: u64,
    /// Log-distance path loss parameters.
    pub pl0_db: f64,
    pub pl_exponent: f64,
    pub wall_loss_db: f64,
}

impl Default for WifiParams {
    fn default() -> Self {
        WifiParams {
            tx_power_dbm: 18.0,
            noise_floor_dbm: -94.0,
            channel_bandwidth_mhz: 160.0,
            per_ppdu_overhead: SimTime::from_us(100),
            max_aggregate_rate_bps: 9_600_000_000,
            pl0_db: 46.4,
            pl_exponent: 3.0,
            wall_loss_db: 10.0,
        }
    }
}

/// PL = PL0 + 10 n log10(d / 1m) + walls * L_wall, distance clamped at 0.1 m.
pub fn path_loss_db(params: &WifiParams, distance_m: f64, walls: u32) -> f64 {
    let d = distance_m.max(0.1);
    params.pl0_db + 10.0 * params.pl_exponent * d.log10() + walls as f64 * params.wall_loss_db
}

pub fn snr_db(params: &WifiParams, distance_m: f64, walls: u32) -> f64 {
    params.tx_power_dbm - path_loss_db(params, distance_m, walls) - params.noise_floor_dbm
}

pub fn rssi_dbm(params: &WifiParams, distance_m: f64, walls: u32) -> f64 {
    params.tx_power_dbm - path_loss_db(params, distance_m, walls)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McsRow {
    pub mcs_index: u8,
    pub min_snr_db: f64,
    pub phy_rate_bps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McsTable {
    rows: Vec<McsRow>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum McsError {
    #[error("MCS table is empty")]
    Empty,
    #[error("MCS table row {0}: min_snr and phy_rate must strictly increase with index")]
    NotMonotonic(usize),
    #[error("bad MCS table line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

impl McsTable {
    pub fn new(rows: Vec<McsRow>) -> Result<McsTable, McsError> {
        if rows.is_empty() {
            return Err(McsError::Empty);
        }
        for i in 1..rows.len() {
            if rows[i].min_snr_db <= rows[i - 1].min_snr_db
                || rows[i].phy_rate_bps <= rows[i - 1].phy_rate_bps
            {
                return Err(McsError::NotMonotonic(i));
            }
        }
        Ok(McsTable { rows })
    }

    /// Built-in WiFi-6 style table. The SNR ladder runs 2..35 dB in 3 dB
    /// steps; rates top out at the WAP aggregate of 9.6 Gbps. The mid rows
    /// are deliberately modest so an 8K stream loses its rate budget once a
    /// wall separates STA and WAP beyond ~10 m.
    pub fn builtin() -> McsTable {
        let rates_mbps: [u64; 12] = [150, 240, 300, 480, 600, 660, 720, 870, 1200, 2400, 4800, 9600];
        let rows = rates_mbps
            .iter()
            .enumerate()
            .map(|(i, &r)| McsRow {
                mcs_index: i as u8,
                min_snr_db: 2.0 + 3.0 * i as f64,
                phy_rate_bps: r * 1_000_000,
            })
            .collect();
        McsTable::new(rows).unwrap()
    }

    /// Parses `mcs_index,min_snr_db,phy_rate_bps` lines (optional header).
    pub fn from_csv(text: &str) -> Result<McsTable, McsError> {
        let mut rows = vec![];
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if idx == 0 && line.starts_with("mcs_index") {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(McsError::Parse {
                    line: idx + 1,
                    reason: "expected 3 comma-separated fields".into(),
                });
            }
            let parse = |s: &str, what: &str| -> Result<f64, McsError> {
                s.parse().map_err(|_| McsError::Parse {
                    line: idx + 1,
                    reason: format!("bad {what} '{s}'"),
                })
            };
            rows.push(McsRow {
                mcs_index: parse(parts[0], "mcs_index")? as u8,
                min_snr_db: parse(parts[1], "min_snr_db")?,
                phy_rate_bps: parse(parts[2], "phy_rate_bps")? as u64,
            });
        }
        McsTable::new(rows)
    }

    pub fn rows(&self) -> &[McsRow] {
        &self.rows
    }

    pub fn top_rate_bps(&self) -> u64 {
        self.rows.last().unwrap().phy_rate_bps
    }

    /// Highest row whose min_snr <= snr (inclusive), or None for link-down.
    pub fn select(&self, snr_db: f64) -> Option<McsRow> {
        self.rows
            .iter()
            .rev()
            .find(|row| row.min_snr_db <= snr_db)
            .copied()
    }
}

/// Airtime of one PPDU carrying `bits` at `phy_rate_bps`.
pub fn airtime(bits: u64, phy_rate_bps: u64, params: &WifiParams) -> SimTime {
    params.per_ppdu_overhead + tx_time(bits, phy_rate_bps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AccessClass {
    Voice,
    Video,
    BestEffort,
    Background,
}

impl AccessClass {
    /// Scheduling priority, highest first: voice > video > best_effort > background.
    pub fn priority(self) -> u8 {
        match self {
            AccessClass::Voice => 0,
            AccessClass::Video => 1,
            AccessClass::BestEffort => 2,
            AccessClass::Background => 3,
        }
    }

    pub fn cw_bounds(self) -> (u32, u32) {
        match self {
            AccessClass::Voice => (3, 7),
            AccessClass::Video => (7, 15),
            AccessClass::BestEffort => (15, 63),
            AccessClass::Background => (15, 1023),
        }
    }

    pub fn parse(s: &str) -> Option<AccessClass> {
        match s {
            "voice" => Some(AccessClass::Voice),
            "video" => Some(AccessClass::Video),
            "best_effort" => Some(AccessClass::BestEffort),
            "background" => Some(AccessClass::Background),
            _ => None,
        }
    }
}

impl std::fmt::Display for AccessClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AccessClass::Voice => "voice",
            AccessClass::Video => "video",
            AccessClass::BestEffort => "best_effort",
            AccessClass::Background => "background",
        };
        f.write_str(s)
    }
}

/// Per-WAP contention-free uplink scheduler. Backlogged STAs are served
/// head-of-line, priority class first, round-robin within a class. The
/// caller reports demand transitions; `next_interval` hands out the next
/// non-overlapping transmission interval.
#[derive(Debug)]
pub struct UplinkScheduler {
    busy_until: SimTime,
    // (class priority, arrival order) queues of sta ids with backlog
    ready: Vec<(AccessClass, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TxInterval {
    pub sta_id: u32,
    pub start: SimTime,
    pub end: SimTime,
}

impl Default for UplinkScheduler {
    fn default() -> Self {
        Self::new()
    }
}

impl UplinkScheduler {
    pub fn new() -> Self {
        UplinkScheduler {
            busy_until: SimTime::ZERO,
            ready: vec![],
        }
    }

    pub fn busy_until(&self) -> SimTime {
        self.busy_until
    }

    pub fn enqueue(&mut self, sta_id: u32, class: AccessClass) {
        if !self.ready.iter().any(|&(_, id)| id == sta_id) {
            self.ready.push((class, sta_id));
        }
    }

    pub fn remove(&mut self, sta_id: u32) {
        self.ready.retain(|&(_, id)| id != sta_id);
    }

    pub fn has_backlog(&self) -> bool {
        !self.ready.is_empty()
    }

    /// Picks the next STA (priority, then round-robin within the top class)
    /// and reserves `duration` for it starting no earlier than `now`.
    /// The STA stays out of the ready set until re-enqueued.
    pub fn next_interval(&mut self, now: SimTime, duration_for: impl Fn(u32) -> SimTime) -> Option<TxInterval> {
        if self.ready.is_empty() {
            return None;
        }
        let top = self.ready.iter().map(|&(c, _)| c.priority()).min().unwrap();
        // ready is FIFO and re-enqueues go to the back, so the oldest entry of
        // the top class gives round-robin within the class
        let pick = self
            .ready
            .iter()
            .position(|&(c, _)| c.priority() == top)
            .unwrap();
        let (_, sta_id) = self.ready.remove(pick);
        let start = now.max(self.busy_until);
        let end = start + duration_for(sta_id);
        self.busy_until = end;
        Some(TxInterval { sta_id, start, end })
    }
}

/// One EDCA contention round over the currently backlogged STAs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentionOutcome {
    Idle,
    /// Winning sta id and the backoff slots consumed before its transmission.
    Winner { sta_id: u32, backoff_slots: u32 },
    /// Colliding sta ids (their CWs have been doubled) and the slots consumed.
    Collision { sta_ids: Vec<u32>, backoff_slots: u32 },
}

/// Per-STA EDCA backoff state.
#[derive(Debug, Clone)]
pub struct EdcaState {
    pub sta_id: u32,
    pub class: AccessClass,
    pub cw: u32,
}

impl EdcaState {
    pub fn new(sta_id: u32, class: AccessClass) -> Self {
        EdcaState {
            sta_id,
            class,
            cw: class.cw_bounds().0,
        }
    }

    fn double_cw(&mut self) {
        self.cw = (self.cw * 2 + 1).min(self.class.cw_bounds().1);
    }

    fn reset_cw(&mut self) {
        self.cw = self.class.cw_bounds().0;
    }
}

/// Each backlogged STA draws a backoff uniform in [0, cw]; the minimum
/// unique draw wins. Equal minima collide: every STA at the minimum doubles
/// its CW (capped) and retries next round; the winner resets its CW.
pub fn edca_contend(active: &mut [EdcaState], rng: &mut impl Rng) -> ContentionOutcome {
    if active.is_empty() {
        return ContentionOutcome::Idle;
    }
    let draws: Vec<u32> = active.iter().map(|s| rng.gen_range(0..=s.cw)).collect();
    let min = *draws.iter().min().unwrap();
    let at_min: Vec<usize> = draws
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == min)
        .map(|(i, _)| i)
        .collect();
    if at_min.len() == 1 {
        let i = at_min[0];
        active[i].reset_cw();
        ContentionOutcome::Winner {
            sta_id: active[i].sta_id,
            backoff_slots: min,
        }
    } else {
        let mut ids = vec![];
        for &i in &at_min {
            active[i].double_cw();
            ids.push(active[i].sta_id);
        }
        ContentionOutcome::Collision {
            sta_ids: ids,
            backoff_slots: min,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::derive_rng;

    #[test]
    fn path_loss_reference_points() {
        let p = WifiParams::default();
        assert!((path_loss_db(&p, 1.0, 0) - 46.4).abs() < 1e-9);
        assert!((path_loss_db(&p, 10.0, 0) - 76.4).abs() < 1e-9);
        let pl20 = path_loss_db(&p, 20.0, 1);
        let expected = 46.4 + 30.0 * 20f64.log10() + 10.0;
        assert!((pl20 - expected).abs() < 1e-9);
        assert!((pl20 - 95.43).abs() < 0.01);
    }

    #[test]
    fn snr_arithmetic_and_monotonicity() {
        let p = WifiParams::default();
        assert!((snr_db(&p, 1.0, 0) - 65.6).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for d in 1..200 {
            let s = snr_db(&p, d as f64 * 0.25, 0);
            assert!(s < prev);
            prev = s;
        }
        let mut boosted = p.clone();
        boosted.tx_power_dbm += 3.0;
        assert!((snr_db(&boosted, 7.0, 1) - snr_db(&p, 7.0, 1) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn mcs_selection_rules() {
        let t = McsTable::builtin();
        let top = t.select(200.0).unwrap();
        assert_eq!(top.mcs_index, 11);
        assert_eq!(top.phy_rate_bps, 9_600_000_000);
        assert!(t.select(1.9).is_none());
        // inclusive boundary
        let row = t.select(5.0).unwrap();
        assert_eq!(row.mcs_index, 1);
    }

    #[test]
    fn mcs_table_rejects_non_monotonic() {
        let rows = vec![
            McsRow { mcs_index: 0, min_snr_db: 2.0, phy_rate_bps: 100 },
            McsRow { mcs_index: 1, min_snr_db: 5.0, phy_rate_bps: 100 },
        ];
        assert_eq!(McsTable::new(rows).unwrap_err(), McsError::NotMonotonic(1));
    }

    #[test]
    fn mcs_csv_roundtrip() {
        let t = McsTable::from_csv("mcs_index,min_snr_db,phy_rate_bps\n0,2,36000000\n1,5,72000000\n").unwrap();
        assert_eq!(t.rows().len(), 2);
        assert_eq!(t.select(6.0).unwrap().phy_rate_bps, 72_000_000);
    }

    #[test]
    fn airtime_arithmetic() {
        let p = WifiParams::default();
        assert_eq!(airtime(0, 1_200_000_000, &p), SimTime::from_us(100));
        let a = airtime(18_000_000, 1_200_000_000, &p);
        assert_eq!(a, SimTime::from_us(100) + SimTime::from_ms(15));
        let mut prev = SimTime::ZERO;
        for bits in [1u64, 10, 1000, 1_000_000, 50_000_000] {
            let t = airtime(bits, 2_400_000_000, &p);
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn scheduler_single_sta_no_contention_delay() {
        let mut s = UplinkScheduler::new();
        s.enqueue(3, AccessClass::Video);
        let iv = s.next_interval(SimTime::from_ms(1), |_| SimTime::from_ms(2)).unwrap();
        assert_eq!(iv.sta_id, 3);
        assert_eq!(iv.start, SimTime::from_ms(1));
        assert_eq!(iv.end, SimTime::from_ms(3));
        assert!(s.next_interval(SimTime::from_ms(1), |_| SimTime::from_ms(2)).is_none());
    }

    #[test]
    fn scheduler_alternates_equal_backlog() {
        // two saturated STAs, identical airtime: compare against an
        // independent round-robin reference
        let mut s = UplinkScheduler::new();
        let air = SimTime::from_us(500);
        s.enqueue(0, AccessClass::Video);
        s.enqueue(1, AccessClass::Video);
        let mut totals = [SimTime::ZERO; 2];
        let mut expected_rr = vec![];
        let mut got = vec![];
        for round in 0..100 {
            let iv = s.next_interval(SimTime::ZERO, |_| air).unwrap();
            totals[iv.sta_id as usize] += iv.end - iv.start;
            got.push(iv.sta_id);
            expected_rr.push((round % 2) as u32);
            // saturated: immediately re-backlogged
            s.enqueue(iv.sta_id, AccessClass::Video);
        }
        assert_eq!(got, expected_rr);
        assert!(totals[0] == totals[1]);
    }

    #[test]
    fn scheduler_intervals_never_overlap() {
        let mut s = UplinkScheduler::new();
        let mut rng = derive_rng(11, "w");
        use rand::Rng;
        let mut last_end = SimTime::ZERO;
        for i in 0..500u32 {
            s.enqueue(i % 5, AccessClass::BestEffort);
            let (now, dur) = (SimTime(rng.gen_range(0..1000)), SimTime(rng.gen_range(1..5000)));
            if let Some(iv) = s.next_interval(now, |_| dur) {
                assert!(iv.start >= last_end);
                assert!(iv.end > iv.start);
                last_end = iv.end;
            }
        }
    }

    #[test]
    fn scheduler_priority_order() {
        let mut s = UplinkScheduler::new();
        s.enqueue(1, AccessClass::Background);
        s.enqueue(2, AccessClass::Video);
        let iv = s.next_interval(SimTime::ZERO, |_| SimTime(1)).unwrap();
        assert_eq!(iv.sta_id, 2, "video beats background");
        let iv = s.next_interval(SimTime::ZERO, |_| SimTime(1)).unwrap();
        assert_eq!(iv.sta_id, 1);
    }

    #[test]
    fn edca_single_sta_always_wins() {
        let mut states = vec![EdcaState::new(0, AccessClass::Video)];
        let mut rng = derive_rng(12, "e");
        for _ in 0..1000 {
            match edca_contend(&mut states, &mut rng) {
                ContentionOutcome::Winner { sta_id: 0, .. } => {}
                other => panic!("unexpected outcome {other:?}"),
            }
        }
    }

    #[test]
    fn edca_forced_equal_backoff_collides_and_doubles() {
        // cw = 0 forces both draws to 0
        let mut states = vec![
            EdcaState { sta_id: 0, class: AccessClass::Video, cw: 0 },
            EdcaState { sta_id: 1, class: AccessClass::Video, cw: 0 },
        ];
        let mut rng = derive_rng(13, "e");
        match edca_contend(&mut states, &mut rng) {
            ContentionOutcome::Collision { sta_ids, .. } => {
                assert_eq!(sta_ids, vec![0, 1]);
            }
            other => panic!("expected collision, got {other:?}"),
        }
        assert_eq!(states[0].cw, 1);
        assert_eq!(states[1].cw, 1);
    }

    #[test]
    fn edca_cw_caps_at_class_max() {
        let mut s = EdcaState::new(0, AccessClass::Video);
        for _ in 0..10 {
            s.double_cw();
        }
        assert_eq!(s.cw, AccessClass::Video.cw_bounds().1);
    }
}
