//! Whole-run properties of the simulator: termination, determinism, crash
//! images and the timestamp sequence.

use wrap_core::engine::{EventKind, StepOp};
use wrap_core::workload::scripted::{abc_concurrent, small_config, W, X};
use wrap_core::workload::{WorkloadKind, WorkloadSpec};
use wrap_core::*;

fn counter(threads: usize, seed: u64) -> (Workload, SimConfig) {
    let spec = WorkloadSpec {
        kind: WorkloadKind::CounterVector,
        threads,
        tx_count: 12,
        writes_per_tx: 2,
        read_write_ratio: 0.0,
        table_lines: 8,
        seed,
    };
    let (w, lines) = spec.build().unwrap();
    (
        w,
        SimConfig {
            home_lines: lines,
            cache_capacity: 8,
            ..SimConfig::default()
        },
    )
}

#[test]
fn two_thread_counter_runs_to_quiescence() {
    let (w, cfg) = counter(2, 1);
    let t = run(&w, &cfg, &Schedule::random(1, 0.2)).unwrap();
    assert_eq!(t.committed_count(), 12);
    assert_eq!(t.final_vdb_len, 0);
    assert_eq!(t.final_dwq_len, 0);
    assert!(t.crashed.is_none());
}

#[test]
fn crash_before_first_event_leaves_initial_image() {
    let (w, cfg) = counter(2, 3);
    let t = run(&w, &cfg, &Schedule::random(3, 0.2).with_crash(CrashPolicy::AtTick(0))).unwrap();
    // The crash is the first and only event.
    assert_eq!(t.events.len(), 1);
    assert_eq!(t.crashed, Some(1));
    assert_eq!(t.final_image, t.initial_image);
}

#[test]
fn same_seed_same_trace() {
    let (w, cfg) = counter(3, 9);
    let a = run(&w, &cfg, &Schedule::random(42, 0.3)).unwrap();
    let b = run(&w, &cfg, &Schedule::random(42, 0.3)).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    let c = run(&w, &cfg, &Schedule::random(43, 0.3)).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn timestamps_start_at_one_and_increase() {
    let (w, cfg) = counter(4, 5);
    let t = run(&w, &cfg, &Schedule::random(5, 0.1)).unwrap();
    assert_eq!(t.timestamps.first().map(|ts| ts.get()), Some(1));
    assert!(t.timestamps.windows(2).all(|p| p[0] < p[1]));
    // Aborted attempts draw persist times too.
    assert!(t.timestamps.len() >= 2 * t.committed_count());
}

#[test]
fn crash_image_grows_monotonically_with_the_tick() {
    let (w, cfg) = counter(2, 7);
    let t = run(&w, &cfg, &Schedule::random(7, 0.3)).unwrap();
    let mut applied = 0;
    for k in 0..=t.last_tick() {
        let img = inject_crash(&t, k).unwrap().image;
        let upto = t.pm_writes.iter().take_while(|p| p.tick <= k).count();
        assert!(upto >= applied);
        applied = upto;
        if k == t.last_tick() {
            assert_eq!(img, t.final_image);
        }
    }
    assert!(inject_crash(&t, t.last_tick() + 1).is_err());
}

#[test]
fn speculative_writes_never_reach_memory_before_commit() {
    let cfg = SimConfig {
        method: Method::HtmOnly,
        ..small_config()
    };
    for seed in 0..50 {
        let t = run(&abc_concurrent(), &cfg, &Schedule::random(seed, 0.5)).unwrap();
        for p in &t.pm_writes {
            let Some(txn) = p.provenance else { continue };
            let rec = t.record(txn).unwrap();
            assert!(rec.commit_tick.is_some_and(|c| c <= p.tick), "{p:?}");
        }
    }
}

#[test]
fn log_lines_bypass_the_delay_buffer() {
    let t = run(&abc_concurrent(), &small_config(), &Schedule::random(11, 0.5)).unwrap();
    let map = t.initial_image.address_map();
    for e in &t.events {
        if let EventKind::Evict { addr, buffered: true } = e.kind {
            assert!(map.is_home(addr));
        }
    }
    assert!(t
        .pm_writes
        .iter()
        .filter(|p| !map.is_home(p.addr))
        .all(|p| p.kind != engine::PmWriteKind::Drain));
}

#[test]
fn a_section_publishes_all_its_writes_at_one_tick() {
    let t = run(&abc_concurrent(), &small_config(), &Schedule::random(2, 0.0)).unwrap();
    for rec in t.committed() {
        assert!(rec.commit_tick.is_some());
        if rec.label == "A" {
            let addrs: Vec<Address> = rec.writes.iter().map(|w| w.0).collect();
            assert!(addrs.contains(&W) && addrs.contains(&X));
        }
    }
    let commits = t
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::ThreadStep { op: StepOp::Commit { .. }, .. }))
        .count();
    assert_eq!(commits, 3);
}

#[test]
fn trace_serializes_as_json_lines() {
    let t = run(&abc_concurrent(), &small_config(), &Schedule::random(4, 0.2)).unwrap();
    let mut buf = Vec::new();
    t.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), t.events.len());
    for line in text.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
}
