//! Workload generators, the undo-logging baseline's costs, and metrics.

use wrap_core::workload::scripted::{small_config, X, Y};
use wrap_core::workload::{emit_csv, run_workload, RunMetrics, WorkloadKind, WorkloadSpec, CSV_COLUMNS};
use wrap_core::*;

fn spec(kind: WorkloadKind, threads: usize) -> WorkloadSpec {
    WorkloadSpec {
        kind,
        threads,
        tx_count: 40,
        writes_per_tx: 4,
        read_write_ratio: 0.0,
        table_lines: 64,
        seed: 3,
    }
}

const METHODS: [Method; 4] = [Method::Wrap, Method::WrapStrict, Method::PtlEager, Method::HtmOnly];

#[test]
fn single_thread_counter_commits_everything_without_aborts() {
    for method in METHODS {
        let cfg = SimConfig {
            method,
            ..SimConfig::default()
        };
        let (m, _) = run_workload(&spec(WorkloadKind::CounterVector, 1), &Schedule::random(1, 0.1), &cfg).unwrap();
        assert_eq!(m.committed_tx, 40, "{method:?}");
        assert_eq!(m.aborts, 0, "{method:?}");
    }
}

#[test]
fn hashtable_with_ten_writes_records_buffer_depth() {
    let s = WorkloadSpec {
        writes_per_tx: 10,
        table_lines: 256,
        threads: 4,
        ..spec(WorkloadKind::Hashtable, 4)
    };
    let (m, _) = run_workload(&s, &Schedule::timed(2, 0.2), &SimConfig::default()).unwrap();
    assert_eq!(m.committed_tx, 40);
    assert!(m.max_vdb_depth > 0);
}

#[test]
fn tree_inserts_read_far_more_than_they_write() {
    let s = WorkloadSpec {
        table_lines: 200,
        ..spec(WorkloadKind::Rbtree, 2)
    };
    let (_, t) = run_workload(&s, &Schedule::random(4, 0.0), &SimConfig::default()).unwrap();
    let reads: usize = t.committed().map(|w| w.reads.len()).sum();
    let writes: usize = t.committed().map(|w| w.write_set.len()).sum();
    assert!(reads > 2 * writes, "reads {reads} writes {writes}");
    let keys = s.logical_state(&t.final_memory);
    assert!(keys.windows(2).all(|k| k[0] < k[1]));
}

#[test]
fn undo_logging_persists_every_line_twice() {
    let w = Workload {
        threads: vec![ThreadProgram::new([TxSpec::new("ten", |m| {
            // Scattered lines, so no flush rides on a previous line's burst.
            for a in 0..10 {
                m.write(Address(3 * a), a + 1)?;
            }
            Ok(())
        })])],
        initial_home: Vec::new(),
    };
    let cfg = SimConfig {
        method: Method::PtlEager,
        home_lines: 32,
        ..SimConfig::default()
    };
    let base = run(&w, &cfg, &Schedule::random(0, 0.0)).unwrap();
    let (undo, data) = base.ptl_pm_writes;
    assert!(undo >= 10 && data >= 10, "{undo} {data}");
    // Each of those writes is charged at the PM write cost.
    let mut slow = cfg.clone();
    slow.latency.pm_write_multiplier *= 4;
    let slow = run(&w, &slow, &Schedule::random(0, 0.0)).unwrap();
    let extra = slow.makespan() - base.makespan();
    assert!(extra >= 20 * 3 * cfg.latency.pm_write());
}

#[test]
fn read_only_undo_transaction_writes_nothing_persistent() {
    let w = Workload {
        threads: vec![ThreadProgram::new([TxSpec::new("peek", |m| {
            m.read(X)?;
            m.read(Y)?;
            Ok(())
        })])],
        initial_home: vec![(X, 4)],
    };
    let cfg = SimConfig {
        method: Method::PtlEager,
        ..small_config()
    };
    let t = run(&w, &cfg, &Schedule::random(0, 0.0)).unwrap();
    assert_eq!(t.committed_count(), 1);
    assert!(t.pm_writes.is_empty());
    assert_eq!(t.ptl_pm_writes, (0, 0));
}

#[test]
fn methods_agree_on_the_final_logical_state() {
    for kind in [WorkloadKind::CounterVector, WorkloadKind::Hashtable, WorkloadKind::Rbtree] {
        let s = spec(kind, 3);
        let states: Vec<_> = METHODS
            .iter()
            .map(|&method| {
                let cfg = SimConfig {
                    method,
                    cache_capacity: 32,
                    ..SimConfig::default()
                };
                let (_, t) = run_workload(&s, &Schedule::random(8, 0.2), &cfg).unwrap();
                s.logical_state(&t.final_memory)
            })
            .collect();
        assert!(states.iter().all(|x| *x == states[0]), "{kind:?}");
    }
}

#[test]
fn thread_sweep_emits_one_csv_row_per_point() {
    let mut rows: Vec<RunMetrics> = Vec::new();
    for method in [Method::Wrap, Method::PtlEager] {
        for threads in [1, 2, 4, 8] {
            let cfg = SimConfig {
                method,
                full_trace: false,
                ..SimConfig::default()
            };
            let (m, _) = run_workload(&spec(WorkloadKind::Hashtable, threads), &Schedule::timed(1, 0.05), &cfg).unwrap();
            rows.push(m);
        }
    }
    let mut out = Vec::new();
    emit_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 8);
    assert_eq!(lines[0].split(',').count(), CSV_COLUMNS.len());
    assert_eq!(lines.iter().filter(|l| l.starts_with("wrap,")).count(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == CSV_COLUMNS.len()));
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        WorkloadSpec { threads: 0, ..spec(WorkloadKind::CounterVector, 1) },
        WorkloadSpec { read_write_ratio: 1.0, ..spec(WorkloadKind::CounterVector, 1) },
        WorkloadSpec { table_lines: 4, writes_per_tx: 3, ..spec(WorkloadKind::Hashtable, 1) },
    ];
    for s in bad {
        assert!(matches!(s.build(), Err(Error::Config(_))), "{s:?}");
    }
    assert_eq!("hashtable".parse::<WorkloadKind>(), Ok(WorkloadKind::Hashtable));
    assert!("btree".parse::<WorkloadKind>().is_err());
}
