//! Per-frame timestamp records and the QoE quantities computed from them:
//! mean end-to-end latency, jitter (std-dev of latency), p99, wireless-hop
//! latency, throughput, and QoE satisfaction.

use std::collections::BTreeMap;

use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QoeRequirements {
    pub max_latency: SimTime,
    pub max_jitter: SimTime,
}

impl Default for QoeRequirements {
    fn default() -> Self {
        QoeRequirements {
            max_latency: SimTime::from_ms(20),
            max_jitter: SimTime::from_ms(15),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    SfOverflow,
    MfOverflow,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::SfOverflow => "sf_overflow",
            DropReason::MfOverflow => "mf_overflow",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameRecord {
    pub stream_id: u32,
    pub frame_id: u64,
    pub gen_time: SimTime,
    pub size_bits: u64,
    pub wifi_done_time: Option<SimTime>,
    pub sf_depart_time: Option<SimTime>,
    pub mf_depart_time: Option<SimTime>,
    pub delivered_time: Option<SimTime>,
    pub dropped: Option<DropReason>,
    /// Straight-line WAP-STA distance at generation time (handover demo bins).
    pub distance_m: f64,
}

impl FrameRecord {
    pub fn new(stream_id: u32, frame_id: u64, gen_time: SimTime, size_bits: u64, distance_m: f64) -> Self {
        FrameRecord {
            stream_id,
            frame_id,
            gen_time,
            size_bits,
            wifi_done_time: None,
            sf_depart_time: None,
            mf_depart_time: None,
            delivered_time: None,
            dropped: None,
            distance_m,
        }
    }

    pub fn e2e_latency(&self) -> Option<SimTime> {
        self.delivered_time.map(|d| d - self.gen_time)
    }

    /// Queuing at the STA plus airtime: wifi_done - gen.
    pub fn wireless_latency(&self) -> Option<SimTime> {
        self.wifi_done_time.map(|w| w - self.gen_time)
    }

    pub fn assert_timestamp_order(&self) {
        let chain = [
            Some(self.gen_time),
            self.wifi_done_time,
            self.sf_depart_time,
            self.mf_depart_time,
            self.delivered_time,
        ];
        let mut last = SimTime::ZERO;
        for t in chain.into_iter().flatten() {
            assert!(t >= last, "timestamps out of path order: {self:?}");
            last = t;
        }
        assert!(
            !(self.delivered_time.is_some() && self.dropped.is_some()),
            "delivered and dropped are exclusive: {self:?}"
        );
    }
}

/// Population standard deviation of a latency window. Fewer than two
/// samples is undefined; reported as zero with `defined = false`.
pub fn jitter(window: &[SimTime]) -> (SimTime, bool) {
    if window.len() < 2 {
        return (SimTime::ZERO, false);
    }
    let n = window.len() as f64;
    let mean = window.iter().map(|t| t.as_ns() as f64).sum::<f64>() / n;
    let var = window
        .iter()
        .map(|t| {
            let d = t.as_ns() as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (SimTime(var.sqrt().round() as u64), true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSummary {
    pub stream_id: u32,
    pub mean_latency_ms: f64,
    pub jitter_ms: f64,
    pub p99_latency_ms: f64,
    pub wireless_latency_ms: f64,
    pub delivered_count: u64,
    pub drop_count: u64,
    pub qoe_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub per_stream: Vec<StreamSummary>,
    pub aggregate: StreamSummary,
    pub generated_count: u64,
    pub in_flight_count: u64,
    pub offered_load_normalized: f64,
}

pub fn qoe_ok(mean_latency: SimTime, jit: SimTime, req: &QoeRequirements) -> bool {
    mean_latency <= req.max_latency && jit <= req.max_jitter
}

fn percentile(sorted_ns: &[u64], p: f64) -> f64 {
    if sorted_ns.is_empty() {
        return 0.0;
    }
    let rank = (p / 100.0 * (sorted_ns.len() - 1) as f64).round() as usize;
    sorted_ns[rank] as f64
}

/// Aggregates records into per-stream and overall summaries. Frames
/// generated before `warmup` are excluded from the latency statistics
/// (transient removal) but still counted for conservation.
pub fn summarize(
    records: &[FrameRecord],
    req: &QoeRequirements,
    warmup: SimTime,
    offered_load_normalized: f64,
) -> RunSummary {
    let mut by_stream: BTreeMap<u32, Vec<&FrameRecord>> = BTreeMap::new();
    for r in records {
        by_stream.entry(r.stream_id).or_default().push(r);
    }
    let mut per_stream = vec![];
    let mut generated = 0u64;
    let mut in_flight = 0u64;
    let mut all_lat: Vec<u64> = vec![];
    let mut all_wireless: Vec<u64> = vec![];
    let mut agg_delivered = 0u64;
    let mut agg_drops = 0u64;
    for (stream_id, recs) in &by_stream {
        generated += recs.len() as u64;
        let mut lats: Vec<u64> = vec![];
        let mut wireless: Vec<u64> = vec![];
        let mut delivered = 0u64;
        let mut drops = 0u64;
        for r in recs {
            if r.dropped.is_some() {
                drops += 1;
            } else if r.delivered_time.is_none() {
                in_flight += 1;
            } else {
                delivered += 1;
                if r.gen_time >= warmup {
                    lats.push(r.e2e_latency().unwrap().as_ns());
                    if let Some(w) = r.wireless_latency() {
                        wireless.push(w.as_ns());
                    }
                }
            }
        }
        all_lat.extend(&lats);
        all_wireless.extend(&wireless);
        agg_delivered += delivered;
        agg_drops += drops;
        per_stream.push(stream_stats(*stream_id, &lats, &wireless, delivered, drops, req));
    }
    let mut aggregate = stream_stats(u32::MAX, &all_lat, &all_wireless, agg_delivered, agg_drops, req);
    // aggregate QoE: all streams must pass
    aggregate.qoe_ok = per_stream.iter().all(|s| s.qoe_ok);
    RunSummary {
        per_stream,
        aggregate,
        generated_count: generated,
        in_flight_count: in_flight,
        offered_load_normalized,
    }
}

fn stream_stats(
    stream_id: u32,
    lats_ns: &[u64],
    wireless_ns: &[u64],
    delivered: u64,
    drops: u64,
    req: &QoeRequirements,
) -> StreamSummary {
    let mean_ns = if lats_ns.is_empty() {
        0.0
    } else {
        lats_ns.iter().map(|&v| v as f64).sum::<f64>() / lats_ns.len() as f64
    };
    let times: Vec<SimTime> = lats_ns.iter().map(|&v| SimTime(v)).collect();
    let (jit, _) = jitter(&times);
    let mut sorted = lats_ns.to_vec();
    sorted.sort_unstable();
    let p99 = percentile(&sorted, 99.0);
    let wmean_ns = if wireless_ns.is_empty() {
        0.0
    } else {
        wireless_ns.iter().map(|&v| v as f64).sum::<f64>() / wireless_ns.len() as f64
    };
    StreamSummary {
        stream_id,
        mean_latency_ms: mean_ns / 1e6,
        jitter_ms: jit.as_ns() as f64 / 1e6,
        p99_latency_ms: p99 / 1e6,
        wireless_latency_ms: wmean_ns / 1e6,
        delivered_count: delivered,
        drop_count: drops,
        qoe_ok: !lats_ns.is_empty()
            && qoe_ok(SimTime(mean_ns.round() as u64), jit, req)
            || lats_ns.is_empty(),
    }
}

/// Raw records CSV, strict format: header row, fixed column count,
/// decimal point, `\n` newlines. Missing timestamps are empty fields.
pub fn records_csv(records: &[FrameRecord]) -> String {
    let mut out = String::from(
        "stream_id,frame_id,gen_ns,size_bits,wifi_done_ns,sf_depart_ns,mf_depart_ns,delivered_ns,dropped,reason\n",
    );
    let opt = |t: Option<SimTime>| t.map(|v| v.as_ns().to_string()).unwrap_or_default();
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.stream_id,
            r.frame_id,
            r.gen_time.as_ns(),
            r.size_bits,
            opt(r.wifi_done_time),
            opt(r.sf_depart_time),
            opt(r.mf_depart_time),
            opt(r.delivered_time),
            if r.dropped.is_some() { 1 } else { 0 },
            r.dropped.map(|d| d.as_str()).unwrap_or(""),
        ));
    }
    out
}

/// Summary CSV: one row per stream plus an `aggregate` row.
pub fn summary_csv(s: &RunSummary, load_label: f64, dba: &str, handover: &str) -> String {
    let mut out = String::from(
        "load,dba,handover,stream,mean_latency_ms,jitter_ms,p99_latency_ms,wireless_latency_ms,delivered,dropped,offered_load_normalized,qoe_ok\n",
    );
    let mut row = |name: &str, st: &StreamSummary| {
        out.push_str(&format!(
            "{:.4},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6},{}\n",
            load_label,
            dba,
            handover,
            name,
            st.mean_latency_ms,
            st.jitter_ms,
            st.p99_latency_ms,
            st.wireless_latency_ms,
            st.delivered_count,
            st.drop_count,
            s.offered_load_normalized,
            st.qoe_ok as u8,
        ));
    };
    for st in &s.per_stream {
        row(&st.stream_id.to_string(), st);
    }
    row("aggregate", &s.aggregate);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(stream: u32, id: u64, gen_ms: u64, delivered_ms: Option<u64>) -> FrameRecord {
        let mut r = FrameRecord::new(stream, id, SimTime::from_ms(gen_ms), 1000, 1.0);
        r.delivered_time = delivered_ms.map(SimTime::from_ms);
        r
    }

    #[test]
    fn e2e_latency_simple() {
        let r = rec(0, 0, 10, Some(13));
        assert_eq!(r.e2e_latency(), Some(SimTime::from_ms(3)));
    }

    #[test]
    fn dropped_frames_excluded_from_latency() {
        let mut dropped = rec(0, 1, 0, None);
        dropped.dropped = Some(DropReason::SfOverflow);
        let records = vec![rec(0, 0, 0, Some(3)), dropped];
        let s = summarize(&records, &QoeRequirements::default(), SimTime::ZERO, 0.1);
        assert_eq!(s.aggregate.delivered_count, 1);
        assert_eq!(s.aggregate.drop_count, 1);
        assert!((s.aggregate.mean_latency_ms - 3.0).abs() < 1e-9);
    }

    #[test]
    fn jitter_basics() {
        assert_eq!(jitter(&[]), (SimTime::ZERO, false));
        assert_eq!(jitter(&[SimTime::from_ms(5)]), (SimTime::ZERO, false));
        let constant = vec![SimTime::from_ms(7); 10];
        assert_eq!(jitter(&constant).0, SimTime::ZERO);
        // {10ms, 20ms} -> population std 5ms
        let two = vec![SimTime::from_ms(10), SimTime::from_ms(20)];
        assert_eq!(jitter(&two).0, SimTime::from_ms(5));
    }

    #[test]
    fn jitter_matches_two_pass_oracle() {
        use rand::Rng;
        let mut rng = crate::sim::derive_rng(1, "m");
        let window: Vec<SimTime> = (0..1000).map(|_| SimTime(rng.gen_range(0..50_000_000))).collect();
        let (j, ok) = jitter(&window);
        assert!(ok);
        // naive two-pass recomputation
        let vals: Vec<f64> = window.iter().map(|t| t.as_ns() as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((j.as_ns() as f64 - var.sqrt()).abs() <= 1.0);
    }

    #[test]
    fn qoe_bounds_inclusive() {
        let req = QoeRequirements::default();
        assert!(qoe_ok(SimTime::from_ms(15), SimTime::from_ms(5), &req));
        assert!(!qoe_ok(SimTime::from_ms(21), SimTime::from_ms(1), &req));
        assert!(qoe_ok(SimTime::from_ms(15), SimTime::from_ms(15), &req));
        assert!(qoe_ok(SimTime::from_ms(20), SimTime::from_ms(15), &req));
    }

    #[test]
    fn summarize_empty() {
        let s = summarize(&[], &QoeRequirements::default(), SimTime::ZERO, 0.0);
        assert_eq!(s.generated_count, 0);
        assert_eq!(s.aggregate.delivered_count, 0);
        assert_eq!(s.aggregate.mean_latency_ms, 0.0);
    }

    #[test]
    fn conservation_identity() {
        let mut in_flight = rec(1, 2, 0, None);
        in_flight.wifi_done_time = Some(SimTime::from_ms(1));
        let mut dropped = rec(1, 3, 0, None);
        dropped.dropped = Some(DropReason::MfOverflow);
        let records = vec![rec(1, 0, 0, Some(5)), rec(1, 1, 10, Some(15)), in_flight, dropped];
        let s = summarize(&records, &QoeRequirements::default(), SimTime::ZERO, 0.0);
        assert_eq!(
            s.generated_count,
            s.aggregate.delivered_count + s.aggregate.drop_count + s.in_flight_count
        );
    }

    #[test]
    fn warmup_excluded_from_stats_not_counts() {
        let records = vec![rec(0, 0, 1, Some(100)), rec(0, 1, 50, Some(53))];
        let s = summarize(&records, &QoeRequirements::default(), SimTime::from_ms(10), 0.0);
        assert_eq!(s.aggregate.delivered_count, 2);
        assert!((s.aggregate.mean_latency_ms - 3.0).abs() < 1e-9);
    }

    #[test]
    fn timestamp_order_asserts() {
        let mut r = rec(0, 0, 10, Some(20));
        r.wifi_done_time = Some(SimTime::from_ms(12));
        r.sf_depart_time = Some(SimTime::from_ms(14));
        r.mf_depart_time = Some(SimTime::from_ms(15));
        r.assert_timestamp_order();
    }

    #[test]
    #[should_panic]
    fn timestamp_disorder_panics() {
        let mut r = rec(0, 0, 10, Some(20));
        r.wifi_done_time = Some(SimTime::from_ms(25));
        r.assert_timestamp_order();
    }

    #[test]
    fn csv_shape() {
        let csv = records_csv(&[rec(2, 7, 1, Some(4))]);
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("stream_id,"));
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 10);
        assert!(row.starts_with("2,7,1000000,1000,"));
    }
}
