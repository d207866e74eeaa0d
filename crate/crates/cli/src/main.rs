//! `wrap`: run workloads on the simulator, check crash consistency, and
//! replay the worked examples.

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use wrap_core::checker::{check_crash_consistency, recovered_image};
use wrap_core::explore::{exhaustive, random_suite, SuiteConfig};
use wrap_core::golden;
use wrap_core::workload::scripted::{
    abc_concurrent, abc_sequential, abc_torn_script, pair_config, pair_workloads, small_config,
};
use wrap_core::workload::{emit_csv, run_workload, RunMetrics, WorkloadKind, WorkloadSpec};
use wrap_core::{
    consistent_states, recover, run, ControllerMode, Method, PmImage, Schedule, SimConfig,
};

#[derive(Parser)]
#[command(name = "wrap", version, about = "Write-aside persistence simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload and emit one CSV row per (method, threads, pm cost) point.
    Run(RunArgs),
    /// Randomized crash-consistency suite, optionally with exhaustive search.
    Check(CheckArgs),
    /// Replay the worked examples and compare against their fixtures.
    Golden {
        /// Also print controller snapshots and replay table as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Recover a saved persistent-memory image.
    Recover {
        #[arg(long)]
        image: PathBuf,
        /// Where to write the recovered image.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, default_value = "hashtable")]
    workload: WorkloadKind,
    /// Comma-separated list.
    #[arg(long, value_delimiter = ',', default_value = "wrap")]
    method: Vec<Method>,
    /// Comma-separated list.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    tx: usize,
    #[arg(long, default_value_t = 10)]
    writes_per_tx: usize,
    /// Fraction of accesses that are pure reads.
    #[arg(long, default_value_t = 0.0)]
    rw_ratio: f64,
    /// Table lines; for the tree, seeded elements.
    #[arg(long, default_value_t = 4096)]
    table_lines: u64,
    /// PM write latency as a multiple of a DRAM write; comma-separated list.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pm_write_cost: Vec<u64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Chance of a random dirty-line eviction per scheduling step.
    #[arg(long, default_value_t = 0.05)]
    eviction_rate: f64,
    /// Crash each run at this tick, recover, and check the result.
    #[arg(long)]
    crash_tick: Option<u64>,
    /// Save the crash image here (with --crash-tick).
    #[arg(long, requires = "crash_tick")]
    image_out: Option<PathBuf>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    csv_out: Option<PathBuf>,
    /// Write the event log of the last run as JSON lines.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mutation {
    None,
    DrainImmediately,
    SkipLogFence,
}

#[derive(clap::Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 1000)]
    schedules: usize,
    /// Transactions per generated run.
    #[arg(long, default_value_t = 8)]
    max_wraps: usize,
    #[arg(long, default_value_t = 4)]
    max_threads: usize,
    #[arg(long, default_value_t = 6)]
    max_writes: usize,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Also enumerate two-wrap interleavings up to this many scheduler choices.
    #[arg(long)]
    exhaustive_depth: Option<usize>,
    /// Evictions the exhaustive search may inject per run.
    #[arg(long, default_value_t = 1)]
    exhaustive_evictions: usize,
    #[arg(long, value_enum, default_value = "none")]
    mutation: Mutation,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Check(a) => cmd_check(a),
        Cmd::Golden { json } => cmd_golden(json),
        Cmd::Recover { image, out } => cmd_recover(image, out),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_run(a: RunArgs) -> anyhow::Result<bool> {
    let mut rows: Vec<RunMetrics> = Vec::new();
    let mut ok = true;
    let mut last_trace = None;
    for &method in &a.method {
        for &threads in &a.threads {
            for &pm in &a.pm_write_cost {
                let spec = WorkloadSpec {
                    kind: a.workload,
                    threads,
                    tx_count: a.tx,
                    writes_per_tx: a.writes_per_tx,
                    read_write_ratio: a.rw_ratio,
                    table_lines: a.table_lines,
                    seed: a.seed,
                };
                let mut cfg = SimConfig {
                    method,
                    full_trace: a.crash_tick.is_some() || a.trace_out.is_some(),
                    ..SimConfig::default()
                };
                cfg.latency.pm_write_multiplier = pm;
                let (m, trace) = run_workload(&spec, &Schedule::timed(a.seed, a.eviction_rate), &cfg)?;
                if let Some(tick) = a.crash_tick {
                    let tick = tick.min(trace.last_tick());
                    let crash = wrap_core::inject_crash(&trace, tick)?;
                    if let Some(path) = &a.image_out {
                        crash.image.save(path)?;
                    }
                    let (home, _) = recovered_image(&trace, tick)?;
                    let verdict = if method == Method::HtmOnly {
                        None
                    } else {
                        Some(check_crash_consistency(&trace, tick)?)
                    };
                    ok &= verdict.as_ref().is_none_or(|v| v.ok());
                    eprintln!(
                        "{}",
                        json!({
                            "method": method.name(),
                            "threads": threads,
                            "pm_write_cost": pm,
                            "crash_tick": tick,
                            "recovered_state": spec.logical_state(&home),
                            "verdict": verdict,
                        })
                    );
                }
                rows.push(m);
                last_trace = Some(trace);
            }
        }
    }
    if let (Some(path), Some(trace)) = (&a.trace_out, &last_trace) {
        trace.write_jsonl(File::create(path).with_context(|| format!("creating {}", path.display()))?)?;
    }
    match &a.csv_out {
        Some(path) => emit_csv(&rows, File::create(path).with_context(|| format!("creating {}", path.display()))?)?,
        None => emit_csv(&rows, io::stdout().lock())?,
    }
    Ok(ok)
}

fn cmd_check(a: CheckArgs) -> anyhow::Result<bool> {
    let sc = SuiteConfig {
        schedules: a.schedules,
        first_seed: a.first_seed,
        max_threads: a.max_threads,
        max_wraps: a.max_wraps,
        max_writes: a.max_writes,
        controller_mode: match a.mutation {
            Mutation::DrainImmediately => ControllerMode::DrainImmediately,
            _ => ControllerMode::Delayed,
        },
        skip_log_fence: matches!(a.mutation, Mutation::SkipLogFence),
        include_ptl: true,
    };
    let rep = random_suite(&sc)?;
    let mut ok = rep.ok();
    let first = rep.violations.first().map(|(seed, v)| json!({"seed": seed, "violation": v}));
    println!(
        "{}",
        json!({
            "suite": {
                "runs": rep.runs,
                "samples": rep.samples,
                "strict_obligations": rep.strict_obligations,
                "violations": rep.violations.len(),
                "first_violation": first,
                "vdb_bound_exceeded": rep.vdb_bound_exceeded.len(),
                "vdb_not_drained": rep.vdb_not_drained.len(),
            }
        })
    );
    if let Some(depth) = a.exhaustive_depth {
        for (name, w) in pair_workloads() {
            for method in [Method::Wrap, Method::WrapStrict] {
                let mut cfg = pair_config(method);
                cfg.controller_mode = sc.controller_mode;
                cfg.skip_log_fence = sc.skip_log_fence;
                let r = exhaustive(&w, &cfg, depth, a.exhaustive_evictions, 5_000_000)?;
                ok &= r.violations.is_empty();
                println!(
                    "{}",
                    json!({
                        "exhaustive": name,
                        "method": method.name(),
                        "runs": r.runs,
                        "samples": r.samples,
                        "truncated": r.truncated,
                        "violations": r.violations.len(),
                    })
                );
            }
        }
    }
    Ok(ok)
}

fn cmd_golden(print: bool) -> anyhow::Result<bool> {
    let trace = golden::golden_trace()?;
    let snaps = golden::snapshots(&trace);
    let replay = golden::replay_table(&trace)?;
    let snaps_ok = snaps == golden::expected_snapshots();
    let replay_ok = replay == golden::expected_replay_table();
    if print {
        println!("{}", json!({"snapshots": snaps, "replay": replay}));
    }
    println!("controller snapshots t1..t12: {}", verdict(snaps_ok));
    println!("recovery table t1..t12: {}", verdict(replay_ok));

    let cfg = |method| SimConfig {
        method,
        home_lines: 4,
        ..small_config()
    };
    let expected: Vec<Vec<u64>> = vec![vec![0, 0, 0, 0], vec![1, 1, 0, 0], vec![2, 1, 2, 0], vec![3, 1, 2, 3]];
    let seq = run(&abc_sequential(), &cfg(Method::Wrap), &Schedule::random(0, 0.0))?;
    let oracle_ok = consistent_states(&seq)?.into_iter().collect::<Vec<_>>() == expected;
    println!("A,B,C oracle states: {}", verdict(oracle_ok));

    let torn = vec![2, 1, 0, 3];
    let script = Schedule::scripted(abc_torn_script());
    let unlogged = run(&abc_concurrent(), &cfg(Method::HtmOnly), &script)?;
    let contrast_ok = unlogged.final_image.home() == torn;
    let logged = run(&abc_concurrent(), &cfg(Method::Wrap), &script)?;
    let mut never_torn = true;
    for k in 0..=logged.last_tick() {
        let (img, _) = recovered_image(&logged, k)?;
        never_torn &= img != torn && expected.contains(&img);
    }
    println!("A,B,C torn evictions without logging reach [2,1,0,3]: {}", verdict(contrast_ok));
    println!("A,B,C torn evictions under WrAP stay consistent: {}", verdict(never_torn));
    Ok(snaps_ok && replay_ok && oracle_ok && contrast_ok && never_torn)
}

fn cmd_recover(image: PathBuf, out: Option<PathBuf>) -> anyhow::Result<bool> {
    let img = PmImage::load(&image).with_context(|| format!("loading {}", image.display()))?;
    let r = recover(&img)?;
    let mut stdout = io::stdout().lock();
    serde_json::to_writer_pretty(
        &mut stdout,
        &json!({
            "t_min": r.t_min,
            "incomplete": r.incomplete,
            "replayed": r.replayed,
            "home": r.final_image.home(),
        }),
    )?;
    writeln!(stdout)?;
    if let Some(path) = out {
        r.final_image.save(&path)?;
    }
    Ok(true)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}
