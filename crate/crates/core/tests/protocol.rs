//! The transaction library end to end: durability waits, log contents and
//! quiesce-based cleanup.

use wrap_core::checker::recovered_image;
use wrap_core::engine::ProgramItem;
use wrap_core::golden::golden_config;
use wrap_core::workload::scripted::{golden_script, golden_workload, small_config, W, X, Y};
use wrap_core::*;

fn strict_golden() -> Trace {
    let mut w = golden_workload();
    for th in &mut w.threads {
        for item in &mut th.items {
            if let ProgramItem::Tx(tx) = item {
                tx.strict = true;
            }
        }
    }
    run(&w, &golden_config(), &Schedule::scripted(golden_script())).unwrap()
}

fn tick_of(t: &Trace, label: &str) -> u64 {
    t.checkpoints.iter().find(|c| c.label == label).unwrap().tick
}

fn by_label<'a>(t: &'a Trace, label: &str) -> &'a engine::WrapRecord {
    t.wraps.iter().find(|w| w.label == label).unwrap()
}

#[test]
fn strict_signal_waits_for_every_earlier_open_wrap() {
    let t = strict_golden();
    let (t11, t12) = (tick_of(&t, "t11"), tick_of(&t, "t12"));
    // T4 closes last: durable at its own close.
    let t4 = by_label(&t, "T4");
    assert_eq!(t4.signal_tick, t4.close_tick);
    // T1 closes at t11 but waits on T4.
    let t1 = by_label(&t, "T1");
    assert!(t1.close_tick.unwrap() <= t11);
    assert!(t1.signal_tick.unwrap() > t11 && t1.signal_tick.unwrap() <= t12);
    // T2 closed at t8 while T1 and T4 were open.
    let t2 = by_label(&t, "T2");
    assert!(t2.close_tick.unwrap() <= tick_of(&t, "t8"));
    assert!(t2.signal_tick.unwrap() > t11);
}

#[test]
fn relaxed_close_returns_without_a_signal() {
    let t = run(
        &golden_workload(),
        &golden_config(),
        &Schedule::scripted(golden_script()),
    )
    .unwrap();
    let t2 = by_label(&t, "T2");
    assert!(t2.close_tick.is_some() && t2.signal_tick.is_none());
    assert_eq!(t2.finish_tick, t2.close_tick);
}

fn two_strict_threads(mode: StrictMode, seed: u64) -> Trace {
    let tx = |a: Address| TxSpec::new("s", move |m| m.write(a, 1)).strict(true);
    let w = Workload {
        threads: vec![
            ThreadProgram::new([tx(X), tx(Y)]),
            ThreadProgram::new([tx(W), tx(X)]),
        ],
        initial_home: Vec::new(),
    };
    let cfg = SimConfig {
        method: Method::WrapStrict,
        strict_mode: mode,
        ..small_config()
    };
    run(&w, &cfg, &Schedule::random(seed, 0.2)).unwrap()
}

#[test]
fn software_strict_waits_only_for_older_open_wraps() {
    for seed in 0..100 {
        let t = two_strict_threads(StrictMode::Software, seed);
        for me in t.committed() {
            let done = me.finish_tick.unwrap();
            for other in t.committed().filter(|o| o.thread != me.thread) {
                // Opened before my persist time and still open at my finish: impossible.
                if other.start_ts < me.persist_ts {
                    assert!(other.close_tick.unwrap() <= done, "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn single_thread_strict_is_durable_at_close() {
    let tx = TxSpec::new("only", |m| m.write(X, 3)).strict(true);
    for mode in [StrictMode::Controller, StrictMode::Software] {
        let cfg = SimConfig {
            method: Method::WrapStrict,
            strict_mode: mode,
            ..small_config()
        };
        let w = Workload {
            threads: vec![ThreadProgram::new([tx.clone()])],
            initial_home: Vec::new(),
        };
        let t = run(&w, &cfg, &Schedule::random(1, 0.0)).unwrap();
        let r = &t.wraps[0];
        // Nothing else is open, so the durability wait takes at most one step.
        assert!(r.finish_tick.unwrap() <= r.close_tick.unwrap() + 1, "{mode:?} {r:?}");
        let (img, _) = recovered_image(&t, r.finish_tick.unwrap()).unwrap();
        assert_eq!(img[X.0 as usize], 3);
    }
}

#[test]
fn concurrent_opens_get_distinct_wraps() {
    for seed in 0..50 {
        let t = two_strict_threads(StrictMode::Controller, seed);
        for a in t.committed() {
            for b in t.committed().filter(|b| b.thread != a.thread) {
                let overlap = a.open_tick < b.close_tick && b.open_tick < a.close_tick;
                if overlap {
                    assert_ne!(a.wrap, b.wrap);
                }
            }
        }
    }
}

#[test]
fn repeated_stores_log_every_entry_and_replay_keeps_the_last() {
    let w = Workload {
        threads: vec![ThreadProgram::new([TxSpec::new("twice", |m| {
            m.write(X, 1)?;
            m.write(X, 2)
        })])],
        initial_home: Vec::new(),
    };
    let t = run(&w, &small_config(), &Schedule::random(0, 0.0)).unwrap();
    assert_eq!(t.wraps[0].writes, vec![(X, 1), (X, 2)]);
    let r = recover(&inject_crash(&t, t.last_tick()).unwrap().image).unwrap();
    assert_eq!(r.replayed[0].write_set, vec![(X, 1), (X, 2)]);
    assert_eq!(r.final_image.home()[X.0 as usize], 2);
}

#[test]
fn empty_transaction_is_still_logged_and_committed() {
    let w = Workload {
        threads: vec![ThreadProgram::new([TxSpec::new("nothing", |_| Ok(()))])],
        initial_home: Vec::new(),
    };
    let t = run(&w, &small_config(), &Schedule::random(0, 0.0)).unwrap();
    assert_eq!(t.committed_count(), 1);
    let r = recover(&inject_crash(&t, t.last_tick()).unwrap().image).unwrap();
    assert_eq!(r.replayed.len(), 1);
    assert!(r.replayed[0].write_set.is_empty());
}

fn with_cleanup() -> Workload {
    let bump = |a: Address| {
        TxSpec::new("bump", move |m| {
            let v = m.read(a)?;
            m.write(a, v + 1)
        })
    };
    let mut t0 = ThreadProgram::new([bump(W), bump(X)]);
    t0.items.push(ProgramItem::Cleanup);
    t0.items.push(ProgramItem::Tx(bump(W)));
    Workload {
        threads: vec![t0, ThreadProgram::new([bump(Y), bump(X), bump(Y)])],
        initial_home: Vec::new(),
    }
}

#[test]
fn cleanup_waits_for_open_wraps_and_retires_their_logs() {
    for seed in 0..100 {
        let t = run(&with_cleanup(), &small_config(), &Schedule::random(seed, 0.3)).unwrap();
        assert_eq!(t.committed_count(), 6);
        for cleaned in t.wraps.iter().filter_map(|w| w.cleaned_tick) {
            for w in &t.wraps {
                if w.open_tick.is_some_and(|o| o < cleaned) {
                    assert!(w.close_tick.is_some_and(|c| c <= cleaned), "seed {seed}");
                }
            }
        }
        assert!(t.wraps.iter().any(|w| w.cleaned_tick.is_some()));
    }
}

#[test]
fn crash_right_after_cleanup_needs_no_replay() {
    for seed in 0..100 {
        let t = run(&with_cleanup(), &small_config(), &Schedule::random(seed, 0.3)).unwrap();
        let cleaned = t.wraps.iter().filter_map(|w| w.cleaned_tick).min().unwrap();
        // The next open after the cleanup started finds a cleared log area.
        let next_open = t
            .wraps
            .iter()
            .filter_map(|w| w.open_tick)
            .filter(|&o| o > cleaned)
            .min()
            .unwrap();
        let img = inject_crash(&t, next_open - 1).unwrap().image;
        let r = recover(&img).unwrap();
        assert!(r.replayed.is_empty() && r.incomplete.is_empty(), "seed {seed}");
        let done: Vec<_> = t.wraps.iter().filter(|w| w.cleaned_tick.is_some()).collect();
        for w in done {
            for &(a, _) in &w.writes {
                assert!(img.home()[a.0 as usize] > 0);
            }
        }
    }
}
