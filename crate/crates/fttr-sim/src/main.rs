use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fttr_sim::engine::{
    demo_bins, grants_csv, handover_csv, run_world, EngineCfg, RunOutput,
};
use fttr_sim::metrics::{records_csv, summary_csv};
use fttr_sim::scenario::parse_with_base;
use fttr_sim::sim::SimTime;
use fttr_sim::topology::{build, topology_dump, DbaMode, Scenario, WifiMode};

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Parser)]
#[command(name = "fttrsim", about = "FTTR network simulator: cascaded TDM-PON + WiFi with XR traffic")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and write records, summaries and audits.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        dba: Option<String>,
        #[arg(long)]
        wifi: Option<String>,
        /// on | off
        #[arg(long)]
        handover: Option<String>,
        #[arg(long)]
        duration: Option<f64>,
        /// Normalized offered load to scale the traffic to.
        #[arg(long)]
        load: Option<f64>,
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        audit_grants: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Load x DBA sweep averaged over seeds; writes sweep.csv.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated normalized loads, e.g. 0.5,0.7,0.8,0.95
        #[arg(long)]
        loads: String,
        /// Comma-separated DBA modes, e.g. ls,pred
        #[arg(long, default_value = "ls,pred")]
        dba: String,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the scenario with handover off and on; writes demo.csv with
    /// wireless latency and throughput per distance bin.
    HandoverDemo {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario file and print violations.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn load_scenario(path: &Path) -> Result<Scenario, (u8, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| (EXIT_IO, format!("cannot read {}: {e}", path.display())))?;
    parse_with_base(&text, path.parent())
        .map_err(|e| (EXIT_VALIDATION, format!("{}: {e}", path.display())))
}

fn write(path: &Path, content: &str) -> Result<(), (u8, String)> {
    std::fs::write(path, content)
        .map_err(|e| (EXIT_IO, format!("cannot write {}: {e}", path.display())))
}

fn run_one(sc: &Scenario, cfg: &EngineCfg, out_dir: &Path) -> Result<RunOutput, (u8, String)> {
    let world = build(sc).map_err(|e| (EXIT_VALIDATION, e.to_string()))?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| (EXIT_IO, format!("cannot create {}: {e}", out_dir.display())))?;
    let out = run_world(&world, cfg);
    let s = &out.summary;
    if s.generated_count != s.aggregate.delivered_count + s.aggregate.drop_count + s.in_flight_count
    {
        return Err((EXIT_INTERNAL, "frame conservation violated".into()));
    }
    write(&out_dir.join("topology.txt"), &topology_dump(&world))?;
    write(&out_dir.join("records.csv"), &records_csv(&out.records))?;
    write(
        &out_dir.join("summary.csv"),
        &summary_csv(
            s,
            sc.offered_load_normalized(),
            sc.dba_mode.as_str(),
            if sc.handover_enabled { "on" } else { "off" },
        ),
    )?;
    write(&out_dir.join("handover.csv"), &handover_csv(&out.handover_audit))?;
    if cfg.audit_grants {
        write(&out_dir.join("grants.csv"), &grants_csv(&out.grant_audit))?;
    }
    if cfg.trace {
        write(&out_dir.join("trace.tsv"), &(out.trace.join("\n") + "\n"))?;
    }
    Ok(out)
}

fn apply_overrides(
    sc: &mut Scenario,
    seed: Option<u64>,
    dba: &Option<String>,
    wifi: &Option<String>,
    handover: &Option<String>,
    duration: Option<f64>,
    load: Option<f64>,
) -> Result<(), (u8, String)> {
    if let Some(s) = seed {
        sc.seed = s;
    }
    if let Some(d) = dba {
        sc.dba_mode = DbaMode::parse(d)
            .ok_or((EXIT_VALIDATION, format!("--dba: expected ls|pred, got '{d}'")))?;
    }
    if let Some(w) = wifi {
        sc.wifi_mode = WifiMode::parse(w).ok_or((
            EXIT_VALIDATION,
            format!("--wifi: expected scheduled|edca, got '{w}'"),
        ))?;
    }
    if let Some(h) = handover {
        sc.handover_enabled = match h.as_str() {
            "on" => true,
            "off" => false,
            _ => return Err((EXIT_VALIDATION, format!("--handover: expected on|off, got '{h}'"))),
        };
    }
    if let Some(d) = duration {
        if d <= 0.0 {
            return Err((EXIT_VALIDATION, "--duration must be positive".into()));
        }
        sc.duration = SimTime::from_secs_f64(d);
    }
    if let Some(l) = load {
        if l <= 0.0 {
            return Err((EXIT_VALIDATION, "--load must be positive".into()));
        }
        sc.load_scale = sc.scale_for_load(l);
    }
    Ok(())
}

fn main_inner() -> Result<(), (u8, String)> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            dba,
            wifi,
            handover,
            duration,
            load,
            trace,
            audit_grants,
            out,
        } => {
            let mut sc = load_scenario(&scenario)?;
            apply_overrides(&mut sc, seed, &dba, &wifi, &handover, duration, load)?;
            let cfg = EngineCfg { trace, audit_grants };
            let result = run_one(&sc, &cfg, &out)?;
            let a = &result.summary.aggregate;
            println!(
                "delivered {} dropped {} in_flight {} mean {:.3} ms jitter {:.3} ms p99 {:.3} ms handovers {}",
                a.delivered_count,
                a.drop_count,
                result.summary.in_flight_count,
                a.mean_latency_ms,
                a.jitter_ms,
                a.p99_latency_ms,
                result.handovers_completed
            );
            Ok(())
        }
        Cmd::Sweep { scenario, loads, dba, seeds, duration, out } => {
            let base = load_scenario(&scenario)?;
            let loads: Vec<f64> = loads
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| (EXIT_VALIDATION, format!("--loads: bad number '{s}'")))
                })
                .collect::<Result<_, _>>()?;
            let modes: Vec<DbaMode> = dba
                .split(',')
                .map(|s| {
                    DbaMode::parse(s.trim())
                        .ok_or((EXIT_VALIDATION, format!("--dba: bad mode '{s}'")))
                })
                .collect::<Result<_, _>>()?;
            if seeds == 0 {
                return Err((EXIT_VALIDATION, "--seeds must be at least 1".into()));
            }
            std::fs::create_dir_all(&out)
                .map_err(|e| (EXIT_IO, format!("cannot create {}: {e}", out.display())))?;
            let resolution = base
                .stas
                .iter()
                .find_map(|s| s.profile.clone())
                .unwrap_or_else(|| "-".into());
            let mut csv = String::from(
                "load,dba,resolution,mean_latency_ms,jitter_ms,p99_latency_ms,qoe_ok\n",
            );
            for &load in &loads {
                for &mode in &modes {
                    let mut mean = 0.0;
                    let mut jit = 0.0;
                    let mut p99 = 0.0;
                    let mut all_ok = true;
                    for i in 0..seeds {
                        let mut sc = base.clone();
                        sc.seed = base.seed + i;
                        sc.dba_mode = mode;
                        sc.load_scale = sc.scale_for_load(load);
                        if let Some(d) = duration {
                            sc.duration = SimTime::from_secs_f64(d);
                        }
                        let world = build(&sc).map_err(|e| (EXIT_VALIDATION, e.to_string()))?;
                        let r = run_world(&world, &EngineCfg::default());
                        let a = &r.summary.aggregate;
                        mean += a.mean_latency_ms;
                        jit += a.jitter_ms;
                        p99 += a.p99_latency_ms;
                        all_ok &= a.qoe_ok;
                    }
                    let n = seeds as f64;
                    csv.push_str(&format!(
                        "{:.4},{},{},{:.6},{:.6},{:.6},{}\n",
                        load,
                        mode.as_str(),
                        resolution,
                        mean / n,
                        jit / n,
                        p99 / n,
                        all_ok as u8
                    ));
                    eprintln!(
                        "load {:.2} {}: mean {:.2} ms jitter {:.2} ms",
                        load,
                        mode.as_str(),
                        mean / n,
                        jit / n
                    );
                }
            }
            write(&out.join("sweep.csv"), &csv)?;
            Ok(())
        }
        Cmd::HandoverDemo { scenario, out } => {
            let base = load_scenario(&scenario)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| (EXIT_IO, format!("cannot create {}: {e}", out.display())))?;
            let stream = base
                .stas
                .iter()
                .find(|s| s.profile.is_some())
                .map(|s| s.sta_id)
                .ok_or((EXIT_VALIDATION, "scenario has no stream source".into()))?;
            let mut csv =
                String::from("distance_bin_m,mode,wireless_latency_ms,throughput_mbps\n");
            for mode in ["off", "on"] {
                let mut sc = base.clone();
                sc.handover_enabled = mode == "on";
                let result = run_one(&sc, &EngineCfg::default(), &out.join(mode))?;
                for (bin, (lat, tput)) in demo_bins(&result.records, stream) {
                    csv.push_str(&format!("{bin},{mode},{lat:.6},{tput:.6}\n"));
                }
                eprintln!("handover {mode}: {} completed", result.handovers_completed);
            }
            write(&out.join("demo.csv"), &csv)?;
            Ok(())
        }
        Cmd::Validate { scenario } => {
            let sc = load_scenario(&scenario)?;
            let violations = sc.validate();
            if violations.is_empty() {
                println!("ok");
                Ok(())
            } else {
                Err((EXIT_VALIDATION, violations.join("\n")))
            }
        }
    }
}

fn main() -> ExitCode {
    match main_inner() {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
