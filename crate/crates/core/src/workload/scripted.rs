//! Hand-written workloads: transactions A, B, C over `[w, x, y, z]`, and the
//! four-transaction worked example with its step-by-step schedule.

use crate::domain::Address;
use crate::engine::{Milestone, ScriptAction, SimConfig, ThreadProgram, TxSpec, Workload};

pub const W: Address = Address(0);
pub const X: Address = Address(1);
pub const Y: Address = Address(2);
pub const Z: Address = Address(3);

/// A: `w = 1; x = w`.
pub fn tx_a() -> TxSpec {
    TxSpec::new("A", |m| {
        m.write(W, 1)?;
        let w = m.read(W)?;
        m.write(X, w)
    })
}

/// B: `w = w + 1; y = w`.
pub fn tx_b() -> TxSpec {
    TxSpec::new("B", |m| {
        let w = m.read(W)? + 1;
        m.write(W, w)?;
        m.write(Y, w)
    })
}

/// C: `w = w + 1; z = w`.
pub fn tx_c() -> TxSpec {
    TxSpec::new("C", |m| {
        let w = m.read(W)? + 1;
        m.write(W, w)?;
        m.write(Z, w)
    })
}

/// A, B and C each on their own thread.
pub fn abc_concurrent() -> Workload {
    Workload {
        threads: vec![
            ThreadProgram::new([tx_a()]),
            ThreadProgram::new([tx_b()]),
            ThreadProgram::new([tx_c()]),
        ],
        initial_home: Vec::new(),
    }
}

/// A, B and C in that order on one thread.
pub fn abc_sequential() -> Workload {
    Workload {
        threads: vec![ThreadProgram::new([tx_a(), tx_b(), tx_c()])],
        initial_home: Vec::new(),
    }
}

/// The eviction pattern that tears an unprotected execution: x leaves the
/// cache after A commits, w after B, z after C.
pub fn abc_torn_script() -> Vec<ScriptAction> {
    use Milestone::Committed;
    use ScriptAction::*;
    vec![
        RunUntil(0, Committed),
        Evict(X),
        RunUntil(1, Committed),
        Evict(W),
        RunUntil(2, Committed),
        Evict(Z),
    ]
}

pub fn small_config() -> SimConfig {
    SimConfig {
        home_lines: 8,
        slots_per_wrap: 4,
        ws_capacity: 8,
        ..SimConfig::default()
    }
}

/// Thread labels of the worked example, by thread index.
pub const GOLDEN_LABELS: [&str; 4] = ["T1", "T2", "T3", "T4"];

/// Worked-example home lines.
pub const GX: Address = Address(0);
pub const GY: Address = Address(1);
pub const GZ: Address = Address(2);

/// T1 increments X; T2 sets X; T3 sets Y; T4 sets Z.
pub fn golden_workload() -> Workload {
    let t1 = TxSpec::new("T1", |m| {
        let x = m.read(GX)?;
        m.write(GX, x + 1)
    });
    let t2 = TxSpec::new("T2", |m| m.write(GX, 1));
    let t3 = TxSpec::new("T3", |m| m.write(GY, 1));
    let t4 = TxSpec::new("T4", |m| m.write(GZ, 1));
    Workload {
        threads: [t1, t2, t3, t4]
            .into_iter()
            .map(|t| ThreadProgram::new([t]))
            .collect(),
        initial_home: Vec::new(),
    }
}

/// Twelve steps, each followed by a checkpoint labelled `t1`..`t12`.
pub fn golden_script() -> Vec<ScriptAction> {
    use Milestone::*;
    use ScriptAction::*;
    let steps: Vec<Vec<ScriptAction>> = vec![
        vec![RunUntil(0, Opened)],
        vec![RunUntil(1, Opened)],
        vec![RunUntil(2, Opened)],
        vec![RunUntil(1, PersistDurable), Evict(GX)],
        vec![RunUntil(3, Opened)],
        vec![RunUntil(2, PersistDurable), Evict(GY)],
        vec![RunUntil(2, Closed)],
        vec![RunUntil(1, Closed), RunUntil(3, Committed)],
        vec![RunUntil(0, PersistDurable), Evict(GZ)],
        vec![RunUntil(3, PersistDurable), Evict(GX)],
        vec![RunUntil(0, Closed)],
        vec![RunUntil(3, Closed)],
    ];
    steps
        .into_iter()
        .enumerate()
        .flat_map(|(i, mut s)| {
            s.push(Checkpoint(format!("t{}", i + 1)));
            s
        })
        .collect()
}

/// Two single-transaction threads with at most two writes each, named by
/// how their footprints overlap: `waw` (the second is strict), `raw`,
/// `disjoint`.
pub fn pair_workloads() -> Vec<(&'static str, Workload)> {
    let two = |p: TxSpec, q: TxSpec| Workload {
        threads: vec![ThreadProgram::new([p]), ThreadProgram::new([q])],
        initial_home: Vec::new(),
    };
    let p = || {
        TxSpec::new("P", |m| {
            m.write(W, 1)?;
            m.write(X, 1)
        })
    };
    vec![
        (
            "waw",
            two(
                p(),
                TxSpec::new("Q", |m| {
                    m.write(X, 2)?;
                    m.write(Y, 2)
                })
                .strict(true),
            ),
        ),
        (
            "raw",
            two(
                p(),
                TxSpec::new("Q", |m| {
                    let v = m.read(W)?;
                    m.write(Y, v + 1)
                }),
            ),
        ),
        (
            "disjoint",
            two(
                p(),
                TxSpec::new("Q", |m| {
                    m.write(Y, 2)?;
                    m.write(Z, 2)
                }),
            ),
        ),
    ]
}

/// Configuration for exhaustive runs: one speculative attempt before the
/// fallback lock keeps the choice tree finite.
pub fn pair_config(method: crate::engine::Method) -> SimConfig {
    SimConfig {
        method,
        retry_threshold: 1,
        home_lines: 4,
        slots_per_wrap: 2,
        ws_capacity: 4,
        ..SimConfig::default()
    }
}
