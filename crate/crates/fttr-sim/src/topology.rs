//! Scenario model and world construction: OLT, MFs, SF/WAPs with room
//! geometry, STAs with positions and mobility legs, and validation.

use std::collections::BTreeMap;

use crate::handover::HandoverPolicy;
use crate::pon::PonSegment;
use crate::sim::SimTime;
use crate::traffic::TrafficProfile;
use crate::wifi::{rssi_dbm, AccessClass, McsTable, WifiParams};

pub const MAX_WAPS_PER_INTERNAL_PON: usize = 8;
/// Mobility resampling period: position, RSSI and MCS re-evaluate this often.
pub const MOBILITY_SAMPLE: SimTime = SimTime(100_000_000);

pub type Point = [f64; 3];

pub fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Room {
    pub min: Point,
    pub max: Point,
}

impl Room {
    pub fn contains(&self, p: Point) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - 1e-9 && p[i] <= self.max[i] + 1e-9)
    }

    pub fn ceiling_center(&self) -> Point {
        [
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            self.max[2],
        ]
    }
}

/// Number of room-boundary crossings of the straight segment a-b. A face
/// shared by two adjacent rooms counts once.
pub fn walls_between(rooms: &[Room], a: Point, b: Point) -> u32 {
    let mut planes: Vec<(u8, i64)> = vec![];
    for room in rooms {
        for axis in 0..2usize {
            for coord in [room.min[axis], room.max[axis]] {
                let da = a[axis] - coord;
                let db = b[axis] - coord;
                // strict interior crossing of the plane
                if da * db >= 0.0 {
                    continue;
                }
                let t = da / (da - db);
                let hit = [
                    a[0] + (b[0] - a[0]) * t,
                    a[1] + (b[1] - a[1]) * t,
                    a[2] + (b[2] - a[2]) * t,
                ];
                let other = 1 - axis;
                let within = hit[other] >= room.min[other] - 1e-9
                    && hit[other] <= room.max[other] + 1e-9
                    && hit[2] >= room.min[2] - 1e-9
                    && hit[2] <= room.max[2] + 1e-9;
                if within {
                    let key = (axis as u8, (coord * 1e6).round() as i64);
                    if !planes.contains(&key) {
                        planes.push(key);
                    }
                }
            }
        }
    }
    planes.len() as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityLeg {
    pub sta_id: u32,
    pub from: Point,
    pub to: Point,
    pub speed_mps: f64,
    pub start_time: SimTime,
}

impl MobilityLeg {
    pub fn end_time(&self) -> SimTime {
        let dist = distance(self.from, self.to);
        self.start_time + SimTime::from_secs_f64(dist / self.speed_mps)
    }
}

/// Piecewise-linear interpolation along the active leg; stationary at the
/// last reached waypoint outside legs.
pub fn position_at(start_pos: Point, legs: &[&MobilityLeg], t: SimTime) -> Point {
    let mut pos = start_pos;
    for leg in legs {
        if t < leg.start_time {
            break;
        }
        if t >= leg.end_time() {
            pos = leg.to;
            continue;
        }
        let elapsed = (t - leg.start_time).as_secs_f64();
        let dist = distance(leg.from, leg.to);
        let frac = if dist > 0.0 { (leg.speed_mps * elapsed / dist).min(1.0) } else { 1.0 };
        return [
            leg.from[0] + (leg.to[0] - leg.from[0]) * frac,
            leg.from[1] + (leg.to[1] - leg.from[1]) * frac,
            leg.from[2] + (leg.to[2] - leg.from[2]) * frac,
        ];
    }
    pos
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DbaMode {
    Ls,
    Pred,
}

impl DbaMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DbaMode::Ls => "ls",
            DbaMode::Pred => "pred",
        }
    }
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ls" => Some(DbaMode::Ls),
            "pred" => Some(DbaMode::Pred),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WifiMode {
    Scheduled,
    Edca,
}

impl WifiMode {
    pub fn as_str(self) -> &'static str {
        match self {
            WifiMode::Scheduled => "scheduled",
            WifiMode::Edca => "edca",
        }
    }
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scheduled" => Some(WifiMode::Scheduled),
            "edca" => Some(WifiMode::Edca),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PonCfg {
    pub capacity_bps: u64,
    pub length_m: u64,
    pub guard_time: SimTime,
    pub max_cycle: SimTime,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WapCfg {
    pub wap_id: u32,
    pub mf_id: u32,
    pub room: usize,
    /// Defaults to the room's ceiling center.
    pub pos: Option<Point>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaCfg {
    pub sta_id: u32,
    pub pos: Point,
    /// Resolution preset or custom profile name; None = receive-only STA.
    pub profile: Option<String>,
    /// Destination STA of this STA's stream.
    pub peer: Option<u32>,
    pub class: AccessClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub duration: SimTime,
    pub external_pon: PonCfg,
    pub internal_pon: PonCfg,
    pub dba_mode: DbaMode,
    pub dba_margin: f64,
    pub predictor_window: usize,
    pub wifi_mode: WifiMode,
    pub wifi: WifiParams,
    pub mcs_table: McsTable,
    pub handover_enabled: bool,
    pub policy: HandoverPolicy,
    pub rooms: Vec<Room>,
    pub waps: Vec<WapCfg>,
    pub stas: Vec<StaCfg>,
    pub mobility: Vec<MobilityLeg>,
    pub custom_profiles: BTreeMap<String, TrafficProfile>,
    pub load_scale: f64,
    pub sf_queue_bits: u64,
    pub mf_queue_bits: u64,
    /// Slot time for the EDCA baseline.
    pub edca_slot: SimTime,
}

impl Scenario {
    pub fn base_defaults() -> Scenario {
        Scenario {
            seed: 1,
            duration: SimTime::from_secs(10),
            external_pon: PonCfg {
                capacity_bps: 50_000_000_000,
                length_m: 20_000,
                guard_time: SimTime::from_us(1),
                max_cycle: SimTime::from_ms(1),
            },
            internal_pon: PonCfg {
                capacity_bps: 10_000_000_000,
                length_m: 20,
                guard_time: SimTime::from_us(1),
                max_cycle: SimTime::from_ms(1),
            },
            dba_mode: DbaMode::Ls,
            dba_margin: 0.1,
            predictor_window: 10,
            wifi_mode: WifiMode::Scheduled,
            wifi: WifiParams::default(),
            mcs_table: McsTable::builtin(),
            handover_enabled: false,
            policy: HandoverPolicy::default(),
            rooms: vec![],
            waps: vec![],
            stas: vec![],
            mobility: vec![],
            custom_profiles: BTreeMap::new(),
            load_scale: 1.0,
            sf_queue_bits: 400_000_000,
            mf_queue_bits: 800_000_000,
            edca_slot: SimTime::from_us(9),
        }
    }

    /// The evaluation topology: 1 OLT, 2 MFs (human / machine side), 8
    /// SF/WAPs per MF, 8 STA pairs streaming to each other.
    pub fn paper_default(resolution: &str) -> Scenario {
        let mut sc = Scenario::base_defaults();
        // human rooms in a row at y 0..10, machine rooms at y 20..30
        for side in 0..2u32 {
            let y0 = side as f64 * 20.0;
            for i in 0..8u32 {
                let x0 = i as f64 * 10.0;
                sc.rooms.push(Room {
                    min: [x0, y0, 0.0],
                    max: [x0 + 10.0, y0 + 10.0, 3.0],
                });
                let wap_id = side * 8 + i;
                sc.waps.push(WapCfg {
                    wap_id,
                    mf_id: side,
                    room: sc.rooms.len() - 1,
                    pos: None,
                });
            }
        }
        for side in 0..2u32 {
            let y = side as f64 * 20.0 + 5.0;
            for i in 0..8u32 {
                let sta_id = side * 8 + i;
                let peer = (1 - side) * 8 + i;
                sc.stas.push(StaCfg {
                    sta_id,
                    pos: [i as f64 * 10.0 + 7.0, y, 1.0],
                    profile: Some(resolution.to_string()),
                    peer: Some(peer),
                    class: AccessClass::Video,
                });
            }
        }
        sc
    }

    /// Handover demo: three rooms in a row on the machine side, one machine
    /// STA walking 20 m away from its starting WAP, streaming 8K to a
    /// stationary human peer.
    pub fn handover_demo_default() -> Scenario {
        let mut sc = Scenario::base_defaults();
        sc.duration = SimTime::from_secs(25);
        // machine side: rooms A, B, C along x; human side: one room
        for i in 0..3 {
            let x0 = i as f64 * 10.0;
            sc.rooms.push(Room { min: [x0, 0.0, 0.0], max: [x0 + 10.0, 10.0, 3.0] });
            sc.waps.push(WapCfg { wap_id: i as u32, mf_id: 0, room: i, pos: None });
        }
        sc.rooms.push(Room { min: [0.0, 20.0, 0.0], max: [10.0, 30.0, 3.0] });
        sc.waps.push(WapCfg { wap_id: 3, mf_id: 1, room: 3, pos: None });
        // machine STA 0 walks from under WAP 0 across rooms B and C
        sc.stas.push(StaCfg {
            sta_id: 0,
            pos: [5.0, 5.0, 1.0],
            profile: Some("8K".into()),
            peer: Some(1),
            class: AccessClass::Video,
        });
        sc.stas.push(StaCfg {
            sta_id: 1,
            pos: [5.0, 25.0, 1.0],
            profile: None,
            peer: None,
            class: AccessClass::Video,
        });
        sc.mobility.push(MobilityLeg {
            sta_id: 0,
            from: [5.0, 5.0, 1.0],
            to: [25.0, 5.0, 1.0],
            speed_mps: 1.0,
            start_time: SimTime::from_secs(2),
        });
        // the mid-table rates already breach QoE right past the first wall;
        // treat everything at or below that point as low-order modulation
        sc.policy.low_mcs_threshold = 7;
        sc
    }

    pub fn profile_for(&self, name: &str) -> Result<TrafficProfile, crate::traffic::TrafficError> {
        if let Some(p) = self.custom_profiles.get(name) {
            return Ok(p.clone());
        }
        TrafficProfile::preset(name)
    }

    /// Aggregate offered rate of all streams over the internal-PON upstream
    /// capacity (the bottleneck named by the config).
    pub fn offered_load_normalized(&self) -> f64 {
        let total: f64 = self
            .stas
            .iter()
            .filter_map(|s| s.profile.as_ref())
            .filter_map(|name| self.profile_for(name).ok())
            .map(|p| p.datarate_bps as f64 * self.load_scale)
            .sum();
        total / self.internal_pon.capacity_bps as f64
    }

    /// Scale factor that brings the aggregate offered rate to `load`.
    pub fn scale_for_load(&self, load: f64) -> f64 {
        let base = {
            let mut s = self.clone();
            s.load_scale = 1.0;
            s.offered_load_normalized()
        };
        assert!(base > 0.0, "scenario has no streams");
        load / base
    }

    pub fn validate(&self) -> Vec<String> {
        let mut violations = vec![];
        let mut wap_per_mf: BTreeMap<u32, usize> = BTreeMap::new();
        for (i, w) in self.waps.iter().enumerate() {
            *wap_per_mf.entry(w.mf_id).or_default() += 1;
            if w.room >= self.rooms.len() {
                violations.push(format!("wap.{i}.room: index {} out of range", w.room));
            }
        }
        for (mf, count) in &wap_per_mf {
            if *count > MAX_WAPS_PER_INTERNAL_PON {
                violations.push(format!(
                    "mf.{mf}: {count} WAPs exceed the {MAX_WAPS_PER_INTERNAL_PON}-WAP internal-PON limit"
                ));
            }
        }
        for (i, s) in self.stas.iter().enumerate() {
            if !self.rooms.iter().any(|r| r.contains(s.pos)) {
                violations.push(format!("sta.{}.pos: STA {} starts outside all rooms", i, s.sta_id));
            }
            if let Some(name) = &s.profile {
                if self.profile_for(name).is_err() {
                    violations.push(format!("sta.{i}.profile: unknown profile '{name}'"));
                }
                if let Some(peer) = s.peer {
                    if !self.stas.iter().any(|o| o.sta_id == peer) {
                        violations.push(format!("sta.{i}.peer: no STA with id {peer}"));
                    }
                } else {
                    violations.push(format!("sta.{i}.peer: stream source without a peer"));
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, s) in self.stas.iter().enumerate() {
            if !seen.insert(s.sta_id) {
                violations.push(format!("sta.{i}: duplicate sta id {}", s.sta_id));
            }
        }
        let mut legs_by_sta: BTreeMap<u32, Vec<&MobilityLeg>> = BTreeMap::new();
        for (i, leg) in self.mobility.iter().enumerate() {
            if leg.speed_mps <= 0.0 {
                violations.push(format!("move.{i}.speed: must be positive"));
            }
            if !self.stas.iter().any(|s| s.sta_id == leg.sta_id) {
                violations.push(format!("move.{i}: unknown sta {}", leg.sta_id));
            }
            legs_by_sta.entry(leg.sta_id).or_default().push(leg);
        }
        for (sta, mut legs) in legs_by_sta {
            legs.sort_by_key(|l| l.start_time);
            for pair in legs.windows(2) {
                if pair[1].start_time < pair[0].end_time() {
                    violations.push(format!("move: overlapping legs in time for sta {sta}"));
                }
            }
        }
        if self.load_scale <= 0.0 {
            violations.push("load.scale: must be positive".into());
        }
        let int_seg = PonSegment {
            capacity_bps: self.internal_pon.capacity_bps,
            length_m: self.internal_pon.length_m,
            guard_time: self.internal_pon.guard_time,
            max_cycle: self.internal_pon.max_cycle,
            onu_ids: (0..MAX_WAPS_PER_INTERNAL_PON as u32).collect(),
        };
        if let Err(e) = int_seg.validate_b_max(int_seg.default_b_max_bits()) {
            violations.push(format!("internal_pon: {e}"));
        }
        violations
    }
}

/// Resolved static topology of one run.
#[derive(Debug, Clone)]
pub struct World {
    pub scenario: Scenario,
    pub wap_pos: Vec<Point>,
    /// Initial STA to WAP association (strongest RSSI, tie to lower wap id).
    pub association: Vec<u32>,
    /// ONU ids (= wap ids) per MF, sorted.
    pub mf_onus: BTreeMap<u32, Vec<u32>>,
    pub external_seg: PonSegment,
    pub internal_segs: BTreeMap<u32, PonSegment>,
    /// Resolved, load-scaled profile per STA that sources a stream.
    pub stream_profiles: BTreeMap<u32, TrafficProfile>,
}

#[derive(Debug, thiserror::Error)]
#[error("scenario validation failed:\n{}", .0.join("\n"))]
pub struct BuildError(pub Vec<String>);

pub fn build(scenario: &Scenario) -> Result<World, BuildError> {
    let violations = scenario.validate();
    if !violations.is_empty() {
        return Err(BuildError(violations));
    }
    let wap_pos: Vec<Point> = scenario
        .waps
        .iter()
        .map(|w| w.pos.unwrap_or_else(|| scenario.rooms[w.room].ceiling_center()))
        .collect();
    let association = scenario
        .stas
        .iter()
        .map(|s| best_wap(scenario, &wap_pos, s.pos).expect("at least one WAP"))
        .collect();
    let mut mf_onus: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for w in &scenario.waps {
        mf_onus.entry(w.mf_id).or_default().push(w.wap_id);
    }
    for onus in mf_onus.values_mut() {
        onus.sort();
    }
    let external_seg = PonSegment {
        capacity_bps: scenario.external_pon.capacity_bps,
        length_m: scenario.external_pon.length_m,
        guard_time: scenario.external_pon.guard_time,
        max_cycle: scenario.external_pon.max_cycle,
        onu_ids: mf_onus.keys().copied().collect(),
    };
    let internal_segs = mf_onus
        .iter()
        .map(|(mf, onus)| {
            (
                *mf,
                PonSegment {
                    capacity_bps: scenario.internal_pon.capacity_bps,
                    length_m: scenario.internal_pon.length_m,
                    guard_time: scenario.internal_pon.guard_time,
                    max_cycle: scenario.internal_pon.max_cycle,
                    onu_ids: onus.clone(),
                },
            )
        })
        .collect();
    let mut stream_profiles = BTreeMap::new();
    for s in &scenario.stas {
        if let Some(name) = &s.profile {
            let p = scenario
                .profile_for(name)
                .map_err(|e| BuildError(vec![e.to_string()]))?
                .scaled(scenario.load_scale);
            p.validate().map_err(|e| BuildError(vec![e.to_string()]))?;
            stream_profiles.insert(s.sta_id, p);
        }
    }
    Ok(World {
        scenario: scenario.clone(),
        wap_pos,
        association,
        mf_onus,
        external_seg,
        internal_segs,
        stream_profiles,
    })
}

/// Strongest-RSSI association with wall attenuation; ties break to the
/// lower wap id.
pub fn best_wap(scenario: &Scenario, wap_pos: &[Point], sta_pos: Point) -> Option<u32> {
    let mut best: Option<(f64, u32)> = None;
    for (w, &pos) in scenario.waps.iter().zip(wap_pos) {
        let d = distance(sta_pos, pos);
        let walls = walls_between(&scenario.rooms, sta_pos, pos);
        let rssi = rssi_dbm(&scenario.wifi, d, walls);
        let better = match best {
            None => true,
            Some((r, id)) => rssi > r + 1e-12 || ((rssi - r).abs() <= 1e-12 && w.wap_id < id),
        };
        if better {
            best = Some((rssi, w.wap_id));
        }
    }
    best.map(|(_, id)| id)
}

/// Node list and positions, for documentation of a resolved build.
pub fn topology_dump(world: &World) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "olt external_pon capacity_bps={} length_m={}\n",
        world.external_seg.capacity_bps, world.external_seg.length_m
    ));
    for (mf, onus) in &world.mf_onus {
        out.push_str(&format!(
            "mf {} internal_pon capacity_bps={} onus={:?}\n",
            mf, world.internal_segs[mf].capacity_bps, onus
        ));
    }
    let agg = world
        .scenario
        .mcs_table
        .top_rate_bps()
        .min(world.scenario.wifi.max_aggregate_rate_bps);
    for (w, pos) in world.scenario.waps.iter().zip(&world.wap_pos) {
        out.push_str(&format!(
            "wap {} mf={} pos=({:.2},{:.2},{:.2}) aggregate_cap_bps={}\n",
            w.wap_id, w.mf_id, pos[0], pos[1], pos[2], agg
        ));
    }
    for (s, assoc) in world.scenario.stas.iter().zip(&world.association) {
        out.push_str(&format!(
            "sta {} pos=({:.2},{:.2},{:.2}) wap={} profile={}\n",
            s.sta_id,
            s.pos[0],
            s.pos[1],
            s.pos[2],
            assoc,
            s.profile.as_deref().unwrap_or("-")
        ));
    }
    out
}
