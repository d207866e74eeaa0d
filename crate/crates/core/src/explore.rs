//! Schedule exploration: seeded random suites over small generated
//! workloads, bounded depth-first enumeration of scheduler choices, and a
//! greedy counterexample minimizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checker::{check_all_ticks, Verdict, Violation};
use crate::engine::{
    run, run_with_chooser, DfsChooser, Method, ProgramItem, Schedule, SimConfig, StrictMode, Trace,
    Workload,
};
use crate::error::Result;
use crate::workload::{WorkloadKind, WorkloadSpec};

/// Bounds for generated suite cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub schedules: usize,
    pub first_seed: u64,
    pub max_threads: usize,
    /// Transactions per run.
    pub max_wraps: usize,
    pub max_writes: usize,
    pub controller_mode: crate::controller::ControllerMode,
    pub skip_log_fence: bool,
    /// Include undo-logging runs.
    pub include_ptl: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            schedules: 1000,
            first_seed: 0,
            max_threads: 4,
            max_wraps: 8,
            max_writes: 6,
            controller_mode: crate::controller::ControllerMode::Delayed,
            skip_log_fence: false,
            include_ptl: true,
        }
    }
}

/// One generated run.
#[derive(Debug, Clone)]
pub struct SuiteCase {
    pub seed: u64,
    pub spec: WorkloadSpec,
    pub workload: Workload,
    pub config: SimConfig,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SuiteReport {
    pub runs: usize,
    /// (run, crash tick) pairs checked.
    pub samples: u64,
    pub strict_obligations: usize,
    pub violations: Vec<(u64, Violation)>,
    /// Runs whose delay buffer peaked above the suite's per-wrap write bound
    /// times the most wraps open at once.
    pub vdb_bound_exceeded: Vec<VdbExcess>,
    /// Runs that ended with a non-empty delay buffer.
    pub vdb_not_drained: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VdbExcess {
    pub seed: u64,
    pub max_vdb_depth: usize,
    pub write_bound: usize,
    pub max_open_wraps: usize,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Deterministically derives a small workload, configuration and schedule
/// from `seed`.
pub fn suite_case(seed: u64, sc: &SuiteConfig) -> SuiteCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0ff_ee00);
    let threads = rng.gen_range(1..=sc.max_threads.max(1));
    let writes = rng.gen_range(1..=sc.max_writes.max(1));
    let kind = match rng.gen_range(0..10) {
        0 => WorkloadKind::Scripted,
        1..=5 => WorkloadKind::CounterVector,
        _ => WorkloadKind::Hashtable,
    };
    let table_lines = match kind {
        WorkloadKind::Hashtable => rng.gen_range(2 * writes as u64..=4 * writes as u64),
        _ => rng.gen_range((writes as u64).max(2)..=2 * writes as u64 + 2),
    };
    let spec = WorkloadSpec {
        kind,
        threads: if kind == WorkloadKind::Scripted { 3 } else { threads },
        tx_count: if kind == WorkloadKind::Scripted {
            3
        } else {
            rng.gen_range(1..=sc.max_wraps.max(1))
        },
        writes_per_tx: writes,
        read_write_ratio: rng.gen_range(0.0..0.5),
        table_lines,
        seed,
    };
    let (mut workload, lines) = spec.build().expect("generated specs are valid");
    let method = match rng.gen_range(0..10) {
        0..=4 => Method::Wrap,
        5..=7 => Method::WrapStrict,
        _ if sc.include_ptl => Method::PtlEager,
        _ => Method::Wrap,
    };
    // Relaxed runs still mark some transactions strict.
    for th in &mut workload.threads {
        for item in &mut th.items {
            if let ProgramItem::Tx(tx) = item {
                tx.strict = rng.gen_bool(0.5);
            }
        }
    }
    let config = SimConfig {
        method,
        home_lines: lines,
        cache_capacity: rng.gen_range(4..=16),
        htm_write_capacity: rng.gen_range(4..=16),
        slots_per_wrap: rng.gen_range(1..=3),
        ws_capacity: 2 * sc.max_writes.max(writes) as u32,
        retry_threshold: rng.gen_range(1..=6),
        strict_mode: if rng.gen_bool(0.3) {
            StrictMode::Software
        } else {
            StrictMode::Controller
        },
        controller_mode: sc.controller_mode,
        skip_log_fence: sc.skip_log_fence,
        ..SimConfig::default()
    };
    let schedule = Schedule::random(seed, rng.gen_range(0.0..0.4));
    SuiteCase {
        seed,
        spec,
        workload,
        config,
        schedule,
    }
}

/// Runs each case once and checks every crash tick plus the lemmas.
pub fn random_suite(sc: &SuiteConfig) -> Result<SuiteReport> {
    let mut rep = SuiteReport::default();
    for seed in sc.first_seed..sc.first_seed + sc.schedules as u64 {
        let case = suite_case(seed, sc);
        let trace = run(&case.workload, &case.config, &case.schedule)?;
        let v = check_all_ticks(&trace)?;
        rep.runs += 1;
        rep.samples += trace.last_tick() + 1;
        rep.strict_obligations += v.strict_obligations;
        rep.violations.extend(v.violations.into_iter().map(|x| (seed, x)));
        if trace.method.uses_wrap() {
            let bound = sc.max_writes;
            if trace.max_vdb_depth > bound * trace.max_open_wraps {
                rep.vdb_bound_exceeded.push(VdbExcess {
                    seed,
                    max_vdb_depth: trace.max_vdb_depth,
                    write_bound: bound,
                    max_open_wraps: trace.max_open_wraps,
                });
            }
            if trace.final_vdb_len != 0 {
                rep.vdb_not_drained.push(seed);
            }
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DfsReport {
    pub runs: usize,
    pub samples: u64,
    /// Whether the run budget ran out before the tree was exhausted.
    pub truncated: bool,
    pub violations: Vec<Violation>,
}

/// Enumerates scheduler choices (thread steps and evictions of dirty home
/// lines) depth-first, checking every crash point of every run.
pub fn exhaustive(
    workload: &Workload,
    config: &SimConfig,
    max_depth: usize,
    max_evictions: usize,
    max_runs: usize,
) -> Result<DfsReport> {
    let mut chooser = DfsChooser::new(max_depth, max_evictions);
    let schedule = Schedule::random(0, 0.0);
    let mut rep = DfsReport::default();
    loop {
        let trace = run_with_chooser(workload, config, &schedule, &mut chooser)?;
        let v = check_all_ticks(&trace)?;
        rep.runs += 1;
        rep.samples += trace.last_tick() + 1;
        rep.violations.extend(v.violations);
        if !chooser.advance() {
            break;
        }
        if rep.runs >= max_runs {
            rep.truncated = true;
            break;
        }
    }
    Ok(rep)
}

/// Greedily drops transactions while `fails` still holds for the rerun.
pub fn minimize(
    workload: &Workload,
    config: &SimConfig,
    schedule: &Schedule,
    fails: impl Fn(&Trace) -> bool,
) -> Result<Workload> {
    let mut cur = workload.clone();
    loop {
        let mut shrunk = false;
        for t in 0..cur.threads.len() {
            let mut i = cur.threads[t].items.len();
            while i > 0 {
                i -= 1;
                let mut cand = cur.clone();
                cand.threads[t].items.remove(i);
                if cand.tx_count() == 0 {
                    continue;
                }
                if let Ok(tr) = run(&cand, config, schedule) {
                    if fails(&tr) {
                        cur = cand;
                        shrunk = true;
                    }
                }
            }
        }
        if !shrunk {
            return Ok(cur);
        }
    }
}

/// Verdict over all crash ticks with a minimized workload attached when
/// it fails.
pub fn check_minimized(case: &SuiteCase) -> Result<(Verdict, Option<Workload>)> {
    let trace = run(&case.workload, &case.config, &case.schedule)?;
    let v = check_all_ticks(&trace)?;
    if v.ok() {
        return Ok((v, None));
    }
    let small = minimize(&case.workload, &case.config, &case.schedule, |t| {
        check_all_ticks(t).is_ok_and(|v| !v.ok())
    })?;
    Ok((v, Some(small)))
}
