//! The four-transaction worked example: controller snapshots after each of
//! the twelve steps and the logs recovery replays after a crash at each.

use serde::{Deserialize, Serialize};

use crate::engine::{inject_crash, run, Schedule, SimConfig, Trace};
use crate::error::Result;
use crate::recovery::recover;
use crate::workload::scripted::{golden_script, golden_workload, small_config, GOLDEN_LABELS};

/// Expected controller state per step, written out by hand.
pub const CONTROLLER_FIXTURE: &str = include_str!("../fixtures/controller_snapshots.json");

/// Expected replay per crash step, in replay order.
pub const REPLAY_TABLE: [(&str, &[&str]); 12] = [
    ("t1", &[]),
    ("t2", &[]),
    ("t3", &[]),
    ("t4", &[]),
    ("t5", &[]),
    ("t6", &[]),
    ("t7", &[]),
    ("t8", &[]),
    ("t9", &["T2"]),
    ("t10", &["T2", "T3"]),
    ("t11", &["T2", "T3"]),
    ("t12", &["T2", "T3", "T4", "T1"]),
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub addr: u64,
    pub data: u64,
    pub ds: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub label: String,
    pub cot: Vec<u8>,
    pub vdb: Vec<SnapshotEntry>,
    pub drained: Vec<u64>,
}

pub fn golden_config() -> SimConfig {
    small_config()
}

pub fn golden_trace() -> Result<Trace> {
    run(
        &golden_workload(),
        &golden_config(),
        &Schedule::scripted(golden_script()),
    )
}

pub fn snapshots(trace: &Trace) -> Vec<Snapshot> {
    trace
        .checkpoints
        .iter()
        .map(|c| Snapshot {
            label: c.label.clone(),
            cot: c.controller.cot.clone(),
            vdb: c
                .controller
                .vdb
                .iter()
                .map(|e| SnapshotEntry {
                    addr: e.addr,
                    data: e.data,
                    ds: e.ds.clone(),
                })
                .collect(),
            drained: c.drained.clone(),
        })
        .collect()
}

pub fn expected_snapshots() -> Vec<Snapshot> {
    serde_json::from_str(CONTROLLER_FIXTURE).expect("fixture parses")
}

/// Crashes right after each checkpoint and names the replayed records.
pub fn replay_table(trace: &Trace) -> Result<Vec<(String, Vec<String>)>> {
    trace
        .checkpoints
        .iter()
        .map(|c| {
            let img = inject_crash(trace, c.tick)?.image;
            let r = recover(&img)?;
            let names = r
                .replayed
                .iter()
                .map(|s| {
                    trace
                        .wraps
                        .iter()
                        .find(|w| w.wrap == Some(s.id.wrap) && w.start_ts == Some(s.start_time))
                        .map_or_else(|| format!("{}", s.id.wrap), |w| GOLDEN_LABELS[w.thread].to_string())
                })
                .collect();
            Ok((c.label.clone(), names))
        })
        .collect()
}

pub fn expected_replay_table() -> Vec<(String, Vec<String>)> {
    REPLAY_TABLE
        .iter()
        .map(|(l, r)| (l.to_string(), r.iter().map(|s| s.to_string()).collect()))
        .collect()
}
