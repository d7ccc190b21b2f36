//! Line-oriented scenario file format: `section.key = value`, `#` comments,
//! repeated sections indexed (`sta.3.profile = 8K`). UTF-8, diff-friendly,
//! bit-exactly specifiable.

use std::collections::BTreeMap;
use std::path::Path;

use crate::sim::SimTime;
use crate::topology::{DbaMode, MobilityLeg, Room, Scenario, StaCfg, WapCfg, WifiMode};
use crate::traffic::TrafficProfile;
use crate::wifi::{AccessClass, McsRow, McsTable};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioParseError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("key '{key}': {reason}")]
    Value { key: String, reason: String },
    #[error("could not read MCS table '{path}': {source}")]
    McsFile {
        path: String,
        source: std::io::Error,
    },
    #[error("bad MCS table: {0}")]
    Mcs(#[from] crate::wifi::McsError),
}

pub fn parse(text: &str) -> Result<Scenario, ScenarioParseError> {
    parse_with_base(text, None)
}

/// Parses a scenario; `base_dir` resolves relative `mcs.file` references.
pub fn parse_with_base(text: &str, base_dir: Option<&Path>) -> Result<Scenario, ScenarioParseError> {
    let mut kv: Vec<(String, String)> = vec![];
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ScenarioParseError::Syntax {
                line: idx + 1,
                reason: format!("expected 'section.key = value', got '{line}'"),
            });
        };
        kv.push((key.trim().to_string(), value.trim().to_string()));
    }

    let mut sc = Scenario::base_defaults();
    let mut rooms: BTreeMap<usize, (Option<[f64; 3]>, Option<[f64; 3]>)> = BTreeMap::new();
    let mut waps: BTreeMap<usize, WapCfg> = BTreeMap::new();
    let mut stas: BTreeMap<usize, StaCfg> = BTreeMap::new();
    let mut mcs_rows: BTreeMap<usize, McsRow> = BTreeMap::new();
    let mut profiles: BTreeMap<String, TrafficProfile> = BTreeMap::new();

    let val_err = |key: &str, reason: String| ScenarioParseError::Value {
        key: key.to_string(),
        reason,
    };
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ScenarioParseError> {
        v.parse().map_err(|_| ScenarioParseError::Value {
            key: key.to_string(),
            reason: format!("bad number '{v}'"),
        })
    }
    fn triple(key: &str, v: &str) -> Result<[f64; 3], ScenarioParseError> {
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(ScenarioParseError::Value {
                key: key.to_string(),
                reason: format!("expected x,y,z, got '{v}'"),
            });
        }
        Ok([num(key, parts[0])?, num(key, parts[1])?, num(key, parts[2])?])
    }

    for (key, v) in &kv {
        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["sim", "seed"] => sc.seed = num(key, v)?,
            ["sim", "duration_s"] => sc.duration = SimTime::from_secs_f64(num(key, v)?),
            ["load", "scale"] => sc.load_scale = num(key, v)?,
            ["external_pon", "capacity_bps"] => sc.external_pon.capacity_bps = num(key, v)?,
            ["external_pon", "length_m"] => sc.external_pon.length_m = num(key, v)?,
            ["external_pon", "guard_ns"] => sc.external_pon.guard_time = SimTime(num(key, v)?),
            ["external_pon", "max_cycle_ns"] => sc.external_pon.max_cycle = SimTime(num(key, v)?),
            ["internal_pon", "capacity_bps"] => sc.internal_pon.capacity_bps = num(key, v)?,
            ["internal_pon", "length_m"] => sc.internal_pon.length_m = num(key, v)?,
            ["internal_pon", "guard_ns"] => sc.internal_pon.guard_time = SimTime(num(key, v)?),
            ["internal_pon", "max_cycle_ns"] => sc.internal_pon.max_cycle = SimTime(num(key, v)?),
            ["dba", "mode"] => {
                sc.dba_mode = DbaMode::parse(v).ok_or_else(|| val_err(key, format!("expected ls|pred, got '{v}'")))?
            }
            ["dba", "margin"] => sc.dba_margin = num(key, v)?,
            ["dba", "window"] => sc.predictor_window = num(key, v)?,
            ["wifi", "mode"] => {
                sc.wifi_mode = WifiMode::parse(v).ok_or_else(|| val_err(key, format!("expected scheduled|edca, got '{v}'")))?
            }
            ["wifi", "tx_power_dbm"] => sc.wifi.tx_power_dbm = num(key, v)?,
            ["wifi", "noise_floor_dbm"] => sc.wifi.noise_floor_dbm = num(key, v)?,
            ["wifi", "bandwidth_mhz"] => sc.wifi.channel_bandwidth_mhz = num(key, v)?,
            ["wifi", "ppdu_overhead_ns"] => sc.wifi.per_ppdu_overhead = SimTime(num(key, v)?),
            ["wifi", "max_aggregate_bps"] => sc.wifi.max_aggregate_rate_bps = num(key, v)?,
            ["wifi", "pl0_db"] => sc.wifi.pl0_db = num(key, v)?,
            ["wifi", "pl_exponent"] => sc.wifi.pl_exponent = num(key, v)?,
            ["wifi", "wall_loss_db"] => sc.wifi.wall_loss_db = num(key, v)?,
            ["wifi", "edca_slot_ns"] => sc.edca_slot = SimTime(num(key, v)?),
            ["queue", "sf_bits"] => sc.sf_queue_bits = num(key, v)?,
            ["queue", "mf_bits"] => sc.mf_queue_bits = num(key, v)?,
            ["handover", "enabled"] => {
                sc.handover_enabled = match *v == *"on" {
                    true => true,
                    false if v == "off" => false,
                    _ => return Err(val_err(key, format!("expected on|off, got '{v}'"))),
                }
            }
            ["handover", "max_latency_ms"] => {
                sc.policy.qoe.max_latency = SimTime::from_secs_f64(num::<f64>(key, v)? / 1e3)
            }
            ["handover", "max_jitter_ms"] => {
                sc.policy.qoe.max_jitter = SimTime::from_secs_f64(num::<f64>(key, v)? / 1e3)
            }
            ["handover", "stats_window"] => sc.policy.stats_window = num(key, v)?,
            ["handover", "ru_trend_window"] => sc.policy.ru_trend_window = num(key, v)?,
            ["handover", "low_mcs_threshold"] => sc.policy.low_mcs_threshold = num(key, v)?,
            ["handover", "hysteresis_db"] => sc.policy.hysteresis_db = num(key, v)?,
            ["handover", "min_available_bps"] => sc.policy.min_available_bps = num(key, v)?,
            ["handover", "cooldown_ms"] => {
                sc.policy.cooldown = SimTime::from_secs_f64(num::<f64>(key, v)? / 1e3)
            }
            ["handover", "sensing_delay_ms"] => {
                sc.policy.sensing_delay = SimTime::from_secs_f64(num::<f64>(key, v)? / 1e3)
            }
            ["mcs", "file"] => {
                let path = match base_dir {
                    Some(dir) => dir.join(v),
                    None => Path::new(v).to_path_buf(),
                };
                let text = std::fs::read_to_string(&path).map_err(|source| ScenarioParseError::McsFile {
                    path: path.display().to_string(),
                    source,
                })?;
                sc.mcs_table = McsTable::from_csv(&text)?;
            }
            ["mcs", idx] => {
                let i: usize = num(key, idx)?;
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(val_err(key, format!("expected min_snr_db,phy_rate_bps, got '{v}'")));
                }
                mcs_rows.insert(
                    i,
                    McsRow {
                        mcs_index: i as u8,
                        min_snr_db: num(key, parts[0])?,
                        phy_rate_bps: num(key, parts[1])?,
                    },
                );
            }
            ["room", idx, field] => {
                let i: usize = num(key, idx)?;
                let entry = rooms.entry(i).or_default();
                match *field {
                    "min" => entry.0 = Some(triple(key, v)?),
                    "max" => entry.1 = Some(triple(key, v)?),
                    other => return Err(val_err(key, format!("unknown room field '{other}'"))),
                }
            }
            ["wap", idx, field] => {
                let i: usize = num(key, idx)?;
                let w = waps.entry(i).or_insert(WapCfg {
                    wap_id: i as u32,
                    mf_id: 0,
                    room: 0,
                    pos: None,
                });
                match *field {
                    "mf" => w.mf_id = num(key, v)?,
                    "room" => w.room = num(key, v)?,
                    "pos" => w.pos = Some(triple(key, v)?),
                    other => return Err(val_err(key, format!("unknown wap field '{other}'"))),
                }
            }
            ["sta", idx, field] => {
                let i: usize = num(key, idx)?;
                let s = stas.entry(i).or_insert(StaCfg {
                    sta_id: i as u32,
                    pos: [0.0; 3],
                    profile: None,
                    peer: None,
                    class: AccessClass::Video,
                });
                match *field {
                    "pos" => s.pos = triple(key, v)?,
                    "profile" => s.profile = Some(v.clone()),
                    "peer" => s.peer = Some(num(key, v)?),
                    "class" => {
                        s.class = AccessClass::parse(v)
                            .ok_or_else(|| val_err(key, format!("unknown access class '{v}'")))?
                    }
                    other => return Err(val_err(key, format!("unknown sta field '{other}'"))),
                }
            }
            ["move", _idx] => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 9 {
                    return Err(val_err(key, format!(
                        "expected sta,fx,fy,fz,tx,ty,tz,speed,start_s (9 fields), got {}",
                        parts.len()
                    )));
                }
                sc.mobility.push(MobilityLeg {
                    sta_id: num(key, parts[0])?,
                    from: [num(key, parts[1])?, num(key, parts[2])?, num(key, parts[3])?],
                    to: [num(key, parts[4])?, num(key, parts[5])?, num(key, parts[6])?],
                    speed_mps: num(key, parts[7])?,
                    start_time: SimTime::from_secs_f64(num(key, parts[8])?),
                });
            }
            ["profile", name, field] => {
                let p = profiles.entry(name.to_string()).or_insert_with(|| {
                    let mut p = TrafficProfile::preset("2K").unwrap();
                    p.label = name.to_string();
                    p
                });
                match *field {
                    "datarate_bps" => p.datarate_bps = num(key, v)?,
                    "fps" => p.fps = num(key, v)?,
                    "sigma_frac" => p.size_sigma_fraction = num(key, v)?,
                    "trunc_low" => p.trunc_low = num(key, v)?,
                    "trunc_high" => p.trunc_high = num(key, v)?,
                    "interarrival_ms" => {
                        p.interarrival_mean = SimTime::from_secs_f64(num::<f64>(key, v)? / 1e3)
                    }
                    "gamma_shape" => p.gamma_shape = num(key, v)?,
                    other => return Err(val_err(key, format!("unknown profile field '{other}'"))),
                }
            }
            _ => {
                return Err(val_err(key, "unknown key".into()));
            }
        }
    }

    for (i, (min, max)) in rooms {
        let (Some(min), Some(max)) = (min, max) else {
            return Err(ScenarioParseError::Value {
                key: format!("room.{i}"),
                reason: "needs both min and max".into(),
            });
        };
        sc.rooms.push(Room { min, max });
    }
    sc.waps = waps.into_values().collect();
    sc.stas = stas.into_values().collect();
    if !mcs_rows.is_empty() {
        sc.mcs_table = McsTable::new(mcs_rows.into_values().collect())?;
    }
    for (name, p) in profiles {
        let mut p = p;
        p.mean_frame_bits = (p.datarate_bps as f64 / p.fps) as u64;
        sc.custom_profiles.insert(name, p);
    }
    Ok(sc)
}

/// Serializes a scenario back to the text format. parse(serialize(s)) == s
/// for scenarios expressible in the format (i.e., without custom MCS files).
pub fn serialize(sc: &Scenario) -> String {
    let mut out = String::new();
    out.push_str(&format!("sim.seed = {}\n", sc.seed));
    out.push_str(&format!("sim.duration_s = {}\n", sc.duration.as_secs_f64()));
    out.push_str(&format!("load.scale = {}\n", sc.load_scale));
    out.push_str(&format!("external_pon.capacity_bps = {}\n", sc.external_pon.capacity_bps));
    out.push_str(&format!("external_pon.length_m = {}\n", sc.external_pon.length_m));
    out.push_str(&format!("external_pon.guard_ns = {}\n", sc.external_pon.guard_time.as_ns()));
    out.push_str(&format!("external_pon.max_cycle_ns = {}\n", sc.external_pon.max_cycle.as_ns()));
    out.push_str(&format!("internal_pon.capacity_bps = {}\n", sc.internal_pon.capacity_bps));
    out.push_str(&format!("internal_pon.length_m = {}\n", sc.internal_pon.length_m));
    out.push_str(&format!("internal_pon.guard_ns = {}\n", sc.internal_pon.guard_time.as_ns()));
    out.push_str(&format!("internal_pon.max_cycle_ns = {}\n", sc.internal_pon.max_cycle.as_ns()));
    out.push_str(&format!("dba.mode = {}\n", sc.dba_mode.as_str()));
    out.push_str(&format!("dba.margin = {}\n", sc.dba_margin));
    out.push_str(&format!("dba.window = {}\n", sc.predictor_window));
    out.push_str(&format!("wifi.mode = {}\n", sc.wifi_mode.as_str()));
    out.push_str(&format!("wifi.tx_power_dbm = {}\n", sc.wifi.tx_power_dbm));
    out.push_str(&format!("wifi.noise_floor_dbm = {}\n", sc.wifi.noise_floor_dbm));
    out.push_str(&format!("wifi.bandwidth_mhz = {}\n", sc.wifi.channel_bandwidth_mhz));
    out.push_str(&format!("wifi.ppdu_overhead_ns = {}\n", sc.wifi.per_ppdu_overhead.as_ns()));
    out.push_str(&format!("wifi.max_aggregate_bps = {}\n", sc.wifi.max_aggregate_rate_bps));
    out.push_str(&format!("wifi.pl0_db = {}\n", sc.wifi.pl0_db));
    out.push_str(&format!("wifi.pl_exponent = {}\n", sc.wifi.pl_exponent));
    out.push_str(&format!("wifi.wall_loss_db = {}\n", sc.wifi.wall_loss_db));
    out.push_str(&format!("wifi.edca_slot_ns = {}\n", sc.edca_slot.as_ns()));
    out.push_str(&format!("queue.sf_bits = {}\n", sc.sf_queue_bits));
    out.push_str(&format!("queue.mf_bits = {}\n", sc.mf_queue_bits));
    out.push_str(&format!("handover.enabled = {}\n", if sc.handover_enabled { "on" } else { "off" }));
    let p = &sc.policy;
    out.push_str(&format!("handover.max_latency_ms = {}\n", p.qoe.max_latency.as_ms_f64()));
    out.push_str(&format!("handover.max_jitter_ms = {}\n", p.qoe.max_jitter.as_ms_f64()));
    out.push_str(&format!("handover.stats_window = {}\n", p.stats_window));
    out.push_str(&format!("handover.ru_trend_window = {}\n", p.ru_trend_window));
    out.push_str(&format!("handover.low_mcs_threshold = {}\n", p.low_mcs_threshold));
    out.push_str(&format!("handover.hysteresis_db = {}\n", p.hysteresis_db));
    out.push_str(&format!("handover.min_available_bps = {}\n", p.min_available_bps));
    out.push_str(&format!("handover.cooldown_ms = {}\n", p.cooldown.as_ms_f64()));
    out.push_str(&format!("handover.sensing_delay_ms = {}\n", p.sensing_delay.as_ms_f64()));
    if sc.mcs_table != McsTable::builtin() {
        for row in sc.mcs_table.rows() {
            out.push_str(&format!(
                "mcs.{} = {},{}\n",
                row.mcs_index, row.min_snr_db, row.phy_rate_bps
            ));
        }
    }
    for (i, r) in sc.rooms.iter().enumerate() {
        out.push_str(&format!("room.{i}.min = {},{},{}\n", r.min[0], r.min[1], r.min[2]));
        out.push_str(&format!("room.{i}.max = {},{},{}\n", r.max[0], r.max[1], r.max[2]));
    }
    for w in &sc.waps {
        out.push_str(&format!("wap.{}.mf = {}\n", w.wap_id, w.mf_id));
        out.push_str(&format!("wap.{}.room = {}\n", w.wap_id, w.room));
        if let Some(pos) = w.pos {
            out.push_str(&format!("wap.{}.pos = {},{},{}\n", w.wap_id, pos[0], pos[1], pos[2]));
        }
    }
    for s in &sc.stas {
        out.push_str(&format!("sta.{}.pos = {},{},{}\n", s.sta_id, s.pos[0], s.pos[1], s.pos[2]));
        if let Some(profile) = &s.profile {
            out.push_str(&format!("sta.{}.profile = {}\n", s.sta_id, profile));
        }
        if let Some(peer) = s.peer {
            out.push_str(&format!("sta.{}.peer = {}\n", s.sta_id, peer));
        }
        out.push_str(&format!("sta.{}.class = {}\n", s.sta_id, s.class));
    }
    for (i, m) in sc.mobility.iter().enumerate() {
        out.push_str(&format!(
            "move.{i} = {},{},{},{},{},{},{},{},{}\n",
            m.sta_id,
            m.from[0],
            m.from[1],
            m.from[2],
            m.to[0],
            m.to[1],
            m.to[2],
            m.speed_mps,
            m.start_time.as_secs_f64()
        ));
    }
    for (name, p) in &sc.custom_profiles {
        out.push_str(&format!("profile.{name}.datarate_bps = {}\n", p.datarate_bps));
        out.push_str(&format!("profile.{name}.fps = {}\n", p.fps));
        out.push_str(&format!("profile.{name}.sigma_frac = {}\n", p.size_sigma_fraction));
        out.push_str(&format!("profile.{name}.trunc_low = {}\n", p.trunc_low));
        out.push_str(&format!("profile.{name}.trunc_high = {}\n", p.trunc_high));
        out.push_str(&format!("profile.{name}.interarrival_ms = {}\n", p.interarrival_mean.as_ms_f64()));
        out.push_str(&format!("profile.{name}.gamma_shape = {}\n", p.gamma_shape));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_paper_default() {
        let sc = Scenario::paper_default("8K");
        let text = serialize(&sc);
        let parsed = parse(&text).unwrap();
        assert_eq!(parsed, sc);
    }

    #[test]
    fn roundtrip_handover_demo() {
        let sc = Scenario::handover_demo_default();
        let parsed = parse(&serialize(&sc)).unwrap();
        assert_eq!(parsed, sc);
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let sc = parse("# a comment\n\nsim.seed = 9  # trailing\n").unwrap();
        assert_eq!(sc.seed, 9);
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse("sim.seed = 1\nnot a key value\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        let err = parse("sim.bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn custom_profile_parsed() {
        let text = "profile.cam.datarate_bps = 1152000\nprofile.cam.fps = 20\nsta.0.pos = 1,1,1\nsta.0.profile = cam\n";
        let sc = parse(text).unwrap();
        let p = sc.custom_profiles.get("cam").unwrap();
        assert_eq!(p.datarate_bps, 1_152_000);
        assert_eq!(p.mean_frame_bits, 57_600);
    }

    #[test]
    fn inline_mcs_rows() {
        let sc = parse("mcs.0 = 2,36000000\nmcs.1 = 5,72000000\n").unwrap();
        assert_eq!(sc.mcs_table.rows().len(), 2);
    }

    #[test]
    fn shipped_scenarios_match_builders() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios");
        let text = std::fs::read_to_string(format!("{dir}/default.scn")).unwrap();
        assert_eq!(parse(&text).unwrap(), Scenario::paper_default("8K"));
        let text = std::fs::read_to_string(format!("{dir}/handover.scn")).unwrap();
        assert_eq!(parse(&text).unwrap(), Scenario::handover_demo_default());
    }
}
