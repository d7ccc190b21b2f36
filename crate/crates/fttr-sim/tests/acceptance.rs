//! Acceptance checklist. Every test prints one PASS/FAIL line; run with
//! `cargo test --test acceptance -- --nocapture` to see them all.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use fttr_sim::engine::{demo_bins, min_e2e_latency, run_world, EngineCfg, RunOutput};
use fttr_sim::metrics::records_csv;
use fttr_sim::sim::{derive_rng, SimTime};
use fttr_sim::topology::{build, DbaMode, MobilityLeg, Scenario, World};
use fttr_sim::traffic::{sample_frame_size, sample_interarrival, TrafficProfile};
use fttr_sim::wifi::{edca_contend, AccessClass, ContentionOutcome, EdcaState};

fn check(num: u32, desc: &str, ok: bool, detail: String) {
    println!("{} {num:02} {desc} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{num:02} {desc}: {detail}");
}

#[derive(Debug)]
struct SweepPoint {
    load: f64,
    res: &'static str,
    dba: DbaMode,
    mean_ms: f64,
    jitter_ms: f64,
}

const SWEEP_LOADS: [f64; 4] = [0.5, 0.7, 0.8, 0.95];
const SWEEP_SEEDS: u64 = 5;

fn sweep() -> &'static [SweepPoint] {
    static SWEEP: OnceLock<Vec<SweepPoint>> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let mut pts = vec![];
        for res in ["2K", "4K", "8K"] {
            let base = Scenario::paper_default(res);
            for load in SWEEP_LOADS {
                for dba in [DbaMode::Ls, DbaMode::Pred] {
                    let (mut mean, mut jit) = (0.0, 0.0);
                    for i in 0..SWEEP_SEEDS {
                        let mut sc = base.clone();
                        sc.seed = base.seed + i;
                        sc.dba_mode = dba;
                        sc.duration = SimTime::from_secs(60);
                        sc.load_scale = sc.scale_for_load(load);
                        let out = run_world(&build(&sc).unwrap(), &EngineCfg::default());
                        mean += out.summary.aggregate.mean_latency_ms;
                        jit += out.summary.aggregate.jitter_ms;
                    }
                    let n = SWEEP_SEEDS as f64;
                    pts.push(SweepPoint { load, res, dba, mean_ms: mean / n, jitter_ms: jit / n });
                }
            }
        }
        pts
    })
}

fn run(sc: &Scenario, cfg: &EngineCfg) -> (World, RunOutput) {
    let world = build(sc).unwrap();
    let out = run_world(&world, cfg);
    (world, out)
}

#[test]
fn a01_ls_8k_breaches_qoe_at_high_load() {
    let worst = sweep()
        .iter()
        .filter(|p| p.dba == DbaMode::Ls && p.res == "8K" && p.load >= 0.8)
        .map(|p| p.mean_ms)
        .fold(f64::INFINITY, f64::min);
    check(
        1,
        "ls dba, 8K: mean latency exceeds 20 ms at load >= 0.8",
        worst > 20.0,
        format!("min over points {worst:.2} ms"),
    );
}

#[test]
fn a02_ls_2k_4k_meet_qoe_at_moderate_load() {
    let worst = sweep()
        .iter()
        .filter(|p| p.dba == DbaMode::Ls && p.res != "8K" && p.load <= 0.7)
        .map(|p| p.mean_ms)
        .fold(0.0, f64::max);
    check(
        2,
        "ls dba, 2K and 4K: mean latency <= 20 ms at loads <= 0.7",
        worst <= 20.0,
        format!("max over points {worst:.2} ms"),
    );
}

#[test]
fn a03_pred_latency_bound_all_loads() {
    let worst = sweep()
        .iter()
        .filter(|p| p.dba == DbaMode::Pred)
        .map(|p| p.mean_ms)
        .fold(0.0, f64::max);
    check(
        3,
        "pred dba: mean latency <= 15 ms at every load up to 0.95, all resolutions",
        worst <= 15.0,
        format!("max over points {worst:.2} ms"),
    );
}

#[test]
fn a04_pred_jitter_bound_all_loads() {
    let worst = sweep()
        .iter()
        .filter(|p| p.dba == DbaMode::Pred)
        .map(|p| p.jitter_ms)
        .fold(0.0, f64::max);
    check(
        4,
        "pred dba: jitter <= 15 ms at every swept load",
        worst <= 15.0,
        format!("max over points {worst:.2} ms"),
    );
}

#[test]
fn a05_handover_demo_latency_ratio() {
    let base = Scenario::handover_demo_default();
    let stream = 0;
    let mut off = base.clone();
    off.handover_enabled = false;
    let (_, out_off) = run(&off, &EngineCfg::default());
    let bins_off = demo_bins(&out_off.records, stream);
    let mut on = base.clone();
    on.handover_enabled = true;
    let (_, out_on) = run(&on, &EngineCfg::default());
    let bins_on = demo_bins(&out_on.records, stream);

    let near = bins_off.get(&5).expect("5 m bin").0;
    let far = bins_off.get(&20).expect("20 m bin").0;
    let far_on = bins_on
        .iter()
        .filter(|(bin, _)| (10..=20).contains(*bin))
        .map(|(_, v)| v.0)
        .fold(0.0, f64::max);
    let ok = far >= 5.0 * near && far_on <= 0.2 * far;
    check(
        5,
        "handover demo: off degrades >= 5x past 10 m, on stays >= 80% below off",
        ok,
        format!(
            "off 5 m {near:.2} ms, off 20 m {far:.2} ms ({:.0}x), on 10-20 m max {far_on:.2} ms",
            far / near
        ),
    );
}

#[test]
fn a06_traffic_distribution_fidelity() {
    let p = TrafficProfile::preset("8K").unwrap();
    let n = 100_000;
    let mut rng = derive_rng(7, "acceptance-traffic");
    let mu = p.mean_frame_bits as f64;
    let lo = (p.trunc_low * mu).floor() as u64;
    let hi = (p.trunc_high * mu).ceil() as u64;
    let mut size_sum = 0.0;
    let mut bounds_ok = true;
    for _ in 0..n {
        let s = sample_frame_size(&p, &mut rng);
        bounds_ok &= (lo..=hi).contains(&s);
        size_sum += s as f64;
    }
    let size_mean_err = (size_sum / n as f64 / mu - 1.0).abs();

    let gaps: Vec<f64> = (0..n)
        .map(|_| sample_interarrival(&p, &mut rng).as_ns() as f64)
        .collect();
    let gap_mean = gaps.iter().sum::<f64>() / n as f64;
    let gap_var = gaps.iter().map(|g| (g - gap_mean) * (g - gap_mean)).sum::<f64>() / n as f64;
    let want_mean = p.interarrival_mean.as_ns() as f64;
    let theta = want_mean / p.gamma_shape;
    let want_var = p.gamma_shape * theta * theta;
    let gap_mean_err = (gap_mean / want_mean - 1.0).abs();
    let gap_var_err = (gap_var / want_var - 1.0).abs();

    let ok = bounds_ok && size_mean_err < 0.01 && gap_mean_err < 0.01 && gap_var_err < 0.05;
    check(
        6,
        "traffic: size bounds hold, size/interarrival means within 1%, gamma variance within 5%",
        ok,
        format!(
            "bounds {bounds_ok}, size mean err {:.4}%, gap mean err {:.4}%, gap var err {:.3}%",
            size_mean_err * 100.0,
            gap_mean_err * 100.0,
            gap_var_err * 100.0
        ),
    );
}

#[test]
fn a07_grant_feasibility_audit() {
    let cfg = EngineCfg { trace: false, audit_grants: true };
    let mut violations = 0u64;
    let mut rows_total = 0usize;
    for dba in [DbaMode::Ls, DbaMode::Pred] {
        let mut sc = Scenario::paper_default("8K");
        sc.dba_mode = dba;
        sc.load_scale = sc.scale_for_load(0.95);
        let (world, out) = run(&sc, &cfg);
        rows_total += out.grant_audit.len();
        let mut by_pon: BTreeMap<&str, Vec<_>> = BTreeMap::new();
        for row in &out.grant_audit {
            by_pon.entry(row.pon.as_str()).or_default().push(row);
        }
        for (label, mut rows) in by_pon {
            let seg = if label == "ext" {
                &world.external_seg
            } else {
                &world.internal_segs[&label[3..].parse().unwrap()]
            };
            let b_max = seg.default_b_max_bits();
            rows.sort_by_key(|r| r.start);
            for pair in rows.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                if b.start < a.start + a.duration {
                    violations += 1; // overlap
                }
                if a.cycle_idx == b.cycle_idx && b.start < a.start + a.duration + seg.guard_time {
                    violations += 1; // guard squeeze
                }
            }
            if dba == DbaMode::Ls {
                violations += rows.iter().filter(|r| r.granted_bits > b_max).count() as u64;
            }
        }
    }
    check(
        7,
        "grants: no overlap, no guard violation, ls grants capped at b_max",
        violations == 0,
        format!("{rows_total} audited rows, {violations} violations"),
    );
}

#[test]
fn a08_conservation_and_order_across_forced_handovers() {
    // walk out across two walls and back: four boundary crossings
    let mut sc = Scenario::handover_demo_default();
    sc.handover_enabled = true;
    sc.duration = SimTime::from_secs(50);
    sc.mobility.push(MobilityLeg {
        sta_id: 0,
        from: [25.0, 5.0, 1.0],
        to: [5.0, 5.0, 1.0],
        speed_mps: 1.0,
        start_time: SimTime::from_secs(25),
    });
    let (_, out) = run(&sc, &EngineCfg::default());
    let s = &out.summary;
    let conserved = s.generated_count
        == s.aggregate.delivered_count + s.aggregate.drop_count + s.in_flight_count;

    let mut last_delivery: BTreeMap<u32, SimTime> = BTreeMap::new();
    let mut order_ok = true;
    for r in &out.records {
        // records are in generation order per stream; delivery must follow it
        if let Some(d) = r.delivered_time {
            let last = last_delivery.entry(r.stream_id).or_insert(SimTime::ZERO);
            order_ok &= d >= *last;
            *last = d;
        }
    }
    let ok = conserved && order_ok && out.handovers_completed >= 3;
    check(
        8,
        "conservation holds and delivery order matches generation order across >= 3 handovers",
        ok,
        format!(
            "generated {} = delivered {} + dropped {} + in flight {}, {} handovers, order {}",
            s.generated_count,
            s.aggregate.delivered_count,
            s.aggregate.drop_count,
            s.in_flight_count,
            out.handovers_completed,
            order_ok
        ),
    );
}

#[test]
fn a09_no_latency_below_path_minimum() {
    let mut checked = 0u64;
    let mut violations = 0u64;
    let mut margin = f64::INFINITY;
    for dba in [DbaMode::Ls, DbaMode::Pred] {
        let mut sc = Scenario::paper_default("8K");
        sc.dba_mode = dba;
        sc.load_scale = sc.scale_for_load(0.8);
        let (world, out) = run(&sc, &EngineCfg::default());
        for r in &out.records {
            if let Some(lat) = r.e2e_latency() {
                checked += 1;
                let floor = min_e2e_latency(&world, r.size_bits);
                if lat < floor {
                    violations += 1;
                }
                margin = margin.min(lat.as_ns() as f64 / floor.as_ns() as f64);
            }
        }
    }
    check(
        9,
        "every delivered latency is at or above the minimum path latency for its size",
        violations == 0,
        format!("{checked} frames, {violations} below floor, tightest ratio {margin:.3}"),
    );
}

#[test]
fn a10_byte_identical_determinism() {
    let mut sc = Scenario::paper_default("8K");
    sc.dba_mode = DbaMode::Pred;
    sc.duration = SimTime::from_secs(5);
    let cfg = EngineCfg { trace: true, audit_grants: false };
    let (_, a) = run(&sc, &cfg);
    let (_, b) = run(&sc, &cfg);
    let csv_same = records_csv(&a.records) == records_csv(&b.records);
    let trace_same = a.trace == b.trace;
    check(
        10,
        "identical scenario and seed give byte-identical records csv and event trace",
        csv_same && trace_same,
        format!(
            "{} records, {} trace lines, csv equal {csv_same}, trace equal {trace_same}",
            a.records.len(),
            a.trace.len()
        ),
    );
}

#[test]
fn a11_summary_matches_naive_recomputation() {
    let sc = Scenario::paper_default("8K");
    let (_, out) = run(&sc, &EngineCfg::default());
    let warmup = SimTime(sc.duration.as_ns() / 20);
    let mut lats: Vec<u64> = out
        .records
        .iter()
        .filter(|r| r.gen_time >= warmup)
        .filter_map(|r| r.e2e_latency())
        .map(|t| t.as_ns())
        .collect();
    lats.sort_unstable();
    let n = lats.len() as f64;
    let mean_ns = lats.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = lats.iter().map(|&v| (v as f64 - mean_ns) * (v as f64 - mean_ns)).sum::<f64>() / n;
    // jitter is defined in whole nanoseconds
    let jitter_ms = var.sqrt().round() / 1e6;
    let rank = (0.99 * (lats.len() - 1) as f64).round() as usize;
    let p99_ms = lats[rank] as f64 / 1e6;

    let a = &out.summary.aggregate;
    let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-9);
    let errs = [
        rel(a.mean_latency_ms, mean_ns / 1e6),
        rel(a.jitter_ms, jitter_ms),
        rel(a.p99_latency_ms, p99_ms),
    ];
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    check(
        11,
        "summary mean, jitter and p99 match naive recomputation from raw records",
        worst <= 1e-12,
        format!("{} samples, worst relative error {worst:.2e}", lats.len()),
    );
}

// naive re-roll of the backoff game for the independent estimate
fn naive_collision_prob(n_sta: usize, rounds: u64, seed_stream: &str) -> f64 {
    let (cw_min, cw_max) = AccessClass::Video.cw_bounds();
    let mut rng = derive_rng(99, seed_stream);
    let mut cw = vec![cw_min; n_sta];
    let mut collisions = 0u64;
    for _ in 0..rounds {
        let draws: Vec<u32> = cw.iter().map(|&c| rand::Rng::gen_range(&mut rng, 0..=c)).collect();
        let min = *draws.iter().min().unwrap();
        let at_min: Vec<usize> =
            (0..n_sta).filter(|&i| draws[i] == min).collect();
        if at_min.len() == 1 {
            cw[at_min[0]] = cw_min;
        } else {
            collisions += 1;
            for &i in &at_min {
                cw[i] = (cw[i] * 2 + 1).min(cw_max);
            }
        }
    }
    collisions as f64 / rounds as f64
}

#[test]
fn a12_edca_saturated_fairness() {
    let n_sta = 8;
    let rounds = 200_000u64;
    let mut active: Vec<EdcaState> =
        (0..n_sta).map(|i| EdcaState::new(i as u32, AccessClass::Video)).collect();
    let mut rng = derive_rng(42, "acceptance-edca");
    let mut wins = vec![0u64; n_sta];
    let mut collisions = 0u64;
    let mut tx = 0u64;
    for _ in 0..rounds {
        match edca_contend(&mut active, &mut rng) {
            ContentionOutcome::Winner { sta_id, .. } => {
                wins[sta_id as usize] += 1;
                tx += 1;
            }
            ContentionOutcome::Collision { .. } => collisions += 1,
            ContentionOutcome::Idle => unreachable!("saturated"),
        }
    }
    let p_col = collisions as f64 / rounds as f64;
    let p_ref = naive_collision_prob(n_sta, rounds, "edca-oracle");
    let shares: Vec<f64> = wins.iter().map(|&w| w as f64 / tx as f64).collect();
    let spread = shares.iter().cloned().fold(0.0, f64::max)
        - shares.iter().cloned().fold(f64::INFINITY, f64::min);
    let ok = (p_col - p_ref).abs() <= 0.02 && spread <= 0.05;
    check(
        12,
        "edca saturation: collision probability matches independent monte carlo, fair win shares",
        ok,
        format!(
            "collision prob {p_col:.4} vs reference {p_ref:.4}, win share spread {:.3}",
            spread
        ),
    );
}
