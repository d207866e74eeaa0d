//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion over all of them. Runs as one test so the criteria execute in
//! order and their timings do not overlap.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use wrap_core::checker::{check_crash_consistency, recovered_image};
use wrap_core::explore::{exhaustive, random_suite, suite_case, SuiteConfig, SuiteReport};
use wrap_core::golden;
use wrap_core::workload::scripted::{
    abc_concurrent, abc_sequential, abc_torn_script, pair_config, pair_workloads, small_config,
};
use wrap_core::workload::{run_workload, WorkloadKind, WorkloadSpec};
use wrap_core::*;

const ABC_SEEDS: u64 = 1000;
const SUITE_SCHEDULES: usize = 2000;
const SUITE_MIN_SAMPLES: u64 = 10_000;
const MUTATION_SAMPLE_BUDGET: u64 = 1000;
const EQUIVALENCE_RUNS: u64 = 1000;
const PM_SWEEP: [u64; 5] = [1, 2, 4, 8, 16];

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
    budget: Duration,
}

fn report(id: u32, name: &'static str, budget: Duration, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    let elapsed = t.elapsed();
    let o = Outcome {
        id,
        name,
        pass: pass && elapsed <= budget,
        detail,
        elapsed,
        budget,
    };
    println!(
        "criterion {:>2} {:<28} {} ({:.2?} of {:?}) {}",
        o.id,
        o.name,
        if o.pass { "PASS" } else { "FAIL" },
        o.elapsed,
        o.budget,
        o.detail
    );
    o
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn golden_snapshots() -> (bool, String) {
    let trace = golden::golden_trace().expect("golden run");
    let got = serde_json::to_value(golden::snapshots(&trace)).unwrap();
    let want = serde_json::to_value(golden::expected_snapshots()).unwrap();
    let bad: Vec<String> = golden::snapshots(&trace)
        .iter()
        .zip(golden::expected_snapshots())
        .filter(|(g, w)| **g != *w)
        .map(|(g, _)| g.label.clone())
        .collect();
    (got == want, format!("12 steps, mismatched {bad:?}"))
}

fn golden_replays() -> (bool, String) {
    let trace = golden::golden_trace().expect("golden run");
    let got = golden::replay_table(&trace).expect("recovery");
    let want = golden::expected_replay_table();
    let bad: Vec<&String> = got
        .iter()
        .zip(&want)
        .filter(|(g, w)| g != w)
        .map(|(g, _)| &g.0)
        .collect();
    (got == want, format!("crash steps mismatched {bad:?}"))
}

fn abc_scenario() -> (bool, String) {
    let expected: BTreeSet<Vec<u64>> = [[0, 0, 0, 0], [1, 1, 0, 0], [2, 1, 2, 0], [3, 1, 2, 3]]
        .into_iter()
        .map(|s| s.to_vec())
        .collect();
    let torn = vec![2, 1, 0, 3];
    let cfg = |method| SimConfig {
        method,
        home_lines: 4,
        ..small_config()
    };

    let seq = run(&abc_sequential(), &cfg(Method::Wrap), &Schedule::random(0, 0.0)).unwrap();
    let oracle_exact = consistent_states(&seq).unwrap() == expected;

    let mut samples = 0u64;
    let mut outside = 0u64;
    let mut torn_seen = 0u64;
    let mut abc_order_runs = 0u64;
    for seed in 0..ABC_SEEDS {
        for method in [Method::Wrap, Method::WrapStrict] {
            for (sequential, w) in [(true, abc_sequential()), (false, abc_concurrent())] {
                let trace = run(&w, &cfg(method), &Schedule::random(seed, 0.3)).unwrap();
                let order: Vec<&str> = trace.commit_order().iter().map(|r| r.label.as_str()).collect();
                let in_abc_order = order == ["A", "B", "C"];
                abc_order_runs += (!sequential && in_abc_order) as u64;
                for k in 0..=trace.last_tick() {
                    let (img, _) = recovered_image(&trace, k).unwrap();
                    samples += 1;
                    torn_seen += (img == torn) as u64;
                    let own = Oracle::new(&trace, Some(k)).states(SCALE_LIMIT).unwrap();
                    let ok = own.contains(&img) && (!in_abc_order || expected.contains(&img));
                    outside += !ok as u64;
                }
            }
        }
    }

    // Without logging the same eviction pattern does tear the state.
    let contrast = run(
        &abc_concurrent(),
        &cfg(Method::HtmOnly),
        &Schedule::scripted(abc_torn_script()),
    )
    .unwrap();
    let contrast_torn = contrast.final_image.home() == torn;

    (
        oracle_exact && outside == 0 && torn_seen == 0 && contrast_torn,
        format!(
            "oracle set exact {oracle_exact}; {samples} crash samples, {outside} outside oracle, \
             {torn_seen} torn; {abc_order_runs} concurrent runs committed A,B,C; \
             unlogged contrast torn {contrast_torn}"
        ),
    )
}

fn strict_failures(rep: &SuiteReport) -> usize {
    rep.violations
        .iter()
        .filter(|(_, v)| matches!(v.kind, ViolationKind::StrictDurability | ViolationKind::Membership))
        .count()
}

fn property_suite(rep: &SuiteReport) -> (bool, String) {
    let mut kinds: BTreeMap<ViolationKind, usize> = BTreeMap::new();
    for (_, v) in &rep.violations {
        *kinds.entry(v.kind).or_default() += 1;
    }
    (
        rep.samples >= SUITE_MIN_SAMPLES && rep.violations.is_empty(),
        format!(
            "{} schedules, {} samples (need >= {SUITE_MIN_SAMPLES}), violations {kinds:?}",
            rep.runs, rep.samples
        ),
    )
}

fn exhaustive_small_scope() -> (bool, String) {
    let mut runs = 0;
    let mut samples = 0;
    let mut violations = 0;
    let mut truncated = 0;
    let mut parts = Vec::new();
    for (name, w) in pair_workloads() {
        let mut bounds = vec![(Method::Wrap, 1000, 1), (Method::WrapStrict, 1000, 1)];
        bounds.push((Method::Wrap, 14, 2));
        for (method, depth, evictions) in bounds {
            let r = exhaustive(&w, &pair_config(method), depth, evictions, 5_000_000).unwrap();
            runs += r.runs;
            samples += r.samples;
            violations += r.violations.len();
            truncated += r.truncated as usize;
            parts.push(format!("{name}/{}/ev{evictions}={}", method.name(), r.runs));
        }
    }
    (
        violations == 0 && truncated == 0,
        format!(
            "{runs} interleavings, {samples} crash points, {violations} violations, \
             {truncated} truncated [{}]",
            parts.join(" ")
        ),
    )
}

fn strict_durability(rep: &SuiteReport) -> (bool, String) {
    let bad = strict_failures(rep);
    (
        rep.strict_obligations > 0 && bad == 0,
        format!(
            "{} (crash tick, fired strict signal) pairs checked, {bad} missing after recovery",
            rep.strict_obligations
        ),
    )
}

/// Samples crash ticks of mutated runs until the checker objects.
fn samples_to_detection(sc: &SuiteConfig) -> Option<u64> {
    let mut samples = 0;
    for seed in 0.. {
        let case = suite_case(seed, sc);
        let trace = run(&case.workload, &case.config, &case.schedule).unwrap();
        for k in 0..=trace.last_tick() {
            samples += 1;
            if !check_crash_consistency(&trace, k).unwrap().ok() {
                return Some(samples);
            }
            if samples >= MUTATION_SAMPLE_BUDGET {
                return None;
            }
        }
    }
    None
}

fn mutation_sensitivity() -> (bool, String) {
    let drain = samples_to_detection(&SuiteConfig {
        controller_mode: ControllerMode::DrainImmediately,
        ..SuiteConfig::default()
    });
    let fence = samples_to_detection(&SuiteConfig {
        skip_log_fence: true,
        ..SuiteConfig::default()
    });
    (
        drain.is_some() && fence.is_some(),
        format!(
            "drain-immediately caught after {drain:?} samples, skipped log fence after {fence:?} \
             (budget {MUTATION_SAMPLE_BUDGET})"
        ),
    )
}

fn trend() -> (bool, String) {
    let spec = WorkloadSpec {
        kind: WorkloadKind::Hashtable,
        threads: 4,
        tx_count: 2000,
        writes_per_tx: 10,
        read_write_ratio: 0.0,
        table_lines: 1 << 12,
        seed: 7,
    };
    let sweep = |method| -> Vec<(f64, f64)> {
        PM_SWEEP
            .iter()
            .map(|&pm| {
                let mut cfg = SimConfig {
                    method,
                    full_trace: false,
                    ..SimConfig::default()
                };
                cfg.latency.pm_write_multiplier = pm;
                let (m, _) = run_workload(&spec, &Schedule::timed(7, 0.05), &cfg).unwrap();
                (m.latency.mean, m.throughput())
            })
            .collect()
    };
    let wrap = sweep(Method::Wrap);
    let ptl = sweep(Method::PtlEager);
    let growth = |v: &[(f64, f64)]| v[v.len() - 1].0 / v[0].0;
    let (gw, gp) = (growth(&wrap), growth(&ptl));
    let tput_ok = wrap.iter().zip(&ptl).all(|(w, p)| w.1 >= p.1);
    let fmt = |v: &[(f64, f64)]| {
        v.iter()
            .map(|(l, t)| format!("{l:.0}/{t:.0}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    (
        gw < gp && tput_ok,
        format!(
            "latency growth wrap {gw:.2}x < ptl {gp:.2}x: {}; throughput wrap >= ptl at every point: \
             {tput_ok}; latency/throughput wrap [{}] ptl [{}]",
            gw < gp,
            fmt(&wrap),
            fmt(&ptl)
        ),
    )
}

fn vdb_bound(rep: &SuiteReport) -> (bool, String) {
    let worst = rep
        .vdb_bound_exceeded
        .iter()
        .max_by_key(|e| e.max_vdb_depth)
        .map(|e| {
            format!(
                "worst seed {}: depth {} > {} x {}",
                e.seed, e.max_vdb_depth, e.write_bound, e.max_open_wraps
            )
        })
        .unwrap_or_default();
    (
        rep.vdb_bound_exceeded.is_empty() && rep.vdb_not_drained.is_empty(),
        format!(
            "{} of {} runs above bound, {} not drained at quiescence; {worst}",
            rep.vdb_bound_exceeded.len(),
            rep.runs,
            rep.vdb_not_drained.len()
        ),
    )
}

fn aborts_and_equivalence() -> (bool, String) {
    let methods = [Method::Wrap, Method::WrapStrict, Method::PtlEager, Method::HtmOnly];
    let mut aborts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut mismatched = 0;
    let mut incomplete = 0;
    for seed in 0..EQUIVALENCE_RUNS {
        let kind = if seed % 2 == 0 {
            WorkloadKind::CounterVector
        } else {
            WorkloadKind::Hashtable
        };
        let spec = WorkloadSpec {
            kind,
            threads: 4,
            tx_count: 16,
            writes_per_tx: 4,
            read_write_ratio: 0.2,
            table_lines: 16,
            seed,
        };
        let mut states = Vec::new();
        for method in methods {
            let cfg = SimConfig {
                method,
                cache_capacity: 16,
                full_trace: false,
                ..SimConfig::default()
            };
            let (m, trace) = run_workload(&spec, &Schedule::random(seed, 0.1), &cfg).unwrap();
            *aborts.entry(method.name()).or_default() += m.aborts;
            incomplete += (m.committed_tx != spec.tx_count) as u64;
            states.push(spec.logical_state(&trace.final_memory));
        }
        mismatched += states.iter().any(|s| *s != states[0]) as u64;
    }
    let direction = aborts["wrap"] >= aborts["htm-only"];
    (
        direction && mismatched == 0 && incomplete == 0,
        format!(
            "aborts {aborts:?}, wrap >= htm-only: {direction}; {mismatched} of {EQUIVALENCE_RUNS} \
             runs disagree on final state, {incomplete} incomplete"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut out = Vec::new();
    out.push(report(1, "golden controller snapshots", secs(1), golden_snapshots));
    out.push(report(2, "golden recovery table", secs(1), golden_replays));
    out.push(report(3, "A,B,C crash states", secs(30), abc_scenario));

    let t = Instant::now();
    let suite = random_suite(&SuiteConfig {
        schedules: SUITE_SCHEDULES,
        ..SuiteConfig::default()
    })
    .expect("suite runs");
    let suite_time = t.elapsed();
    out.push(report(4, "randomized property suite", secs(300), || {
        let (ok, d) = property_suite(&suite);
        (ok && suite_time <= secs(300), format!("{d}, suite took {suite_time:.2?}"))
    }));

    out.push(report(5, "exhaustive small scope", secs(120), exhaustive_small_scope));
    out.push(report(6, "strict durability", secs(1), || strict_durability(&suite)));
    out.push(report(7, "mutation sensitivity", secs(60), mutation_sensitivity));
    out.push(report(8, "pm write cost trend", secs(120), trend));
    out.push(report(9, "delay buffer bound", secs(1), || vdb_bound(&suite)));
    out.push(report(10, "aborts and equivalence", secs(120), aborts_and_equivalence));

    let failed: Vec<String> = out
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} ({})", o.id, o.name))
        .collect();
    println!(
        "acceptance: {} of {} criteria pass",
        out.len() - failed.len(),
        out.len()
    );
    assert!(failed.is_empty(), "failing criteria: {}", failed.join(", "));
}
