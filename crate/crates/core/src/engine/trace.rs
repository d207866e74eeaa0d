//! Execution traces: the event log, every persistent-memory write, and the
//! per-transaction bookkeeping the checker consumes.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerDump;
use crate::domain::{Address, LineValue, Timestamp, TxnId, WrapId};
use crate::error::{Error, Result};
use crate::htm::AbortStats;
use crate::memory::PmImage;

use super::Method;

/// What a thread step did, for trace readers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StepOp {
    Idle,
    Open { wrap: WrapId, start: Timestamp },
    Flush { addr: Address },
    Begin,
    Read { addr: Address, value: LineValue },
    Write { addr: Address, value: LineValue },
    LogAppend { index: u32 },
    Commit { persist: Option<Timestamp> },
    Abort,
    Backoff,
    AcquireLock,
    WriteEnd,
    Close { wrap: WrapId },
    Durable,
    Finish,
    Blocked,
    Cleanup,
    UndoLog { addr: Address },
    Undo { addr: Address },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    ThreadStep {
        thread: usize,
        #[serde(flatten)]
        op: StepOp,
    },
    Evict {
        addr: Address,
        buffered: bool,
    },
    Crash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub tick: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PmWriteKind {
    /// Eviction that bypassed the delay buffer.
    Evict,
    /// Fence-driven write-back that bypassed the delay buffer.
    Flush,
    /// Delay-buffer entry released by a close.
    Drain,
}

/// One line reaching persistent memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmWrite {
    pub tick: u64,
    pub addr: Address,
    pub value: LineValue,
    pub provenance: Option<TxnId>,
    pub kind: PmWriteKind,
}

/// A value a committed transaction read from outside its own writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadObservation {
    pub addr: Address,
    pub value: LineValue,
}

/// Bookkeeping for one transaction instance (all retries included).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrapRecord {
    pub txn: TxnId,
    pub thread: usize,
    pub label: String,
    pub wrap: Option<WrapId>,
    pub slot: Option<u32>,
    pub strict: bool,
    pub start_ts: Option<Timestamp>,
    pub persist_ts: Option<Timestamp>,
    pub begin_tick: Option<u64>,
    pub open_tick: Option<u64>,
    pub commit_tick: Option<u64>,
    pub persist_durable_tick: Option<u64>,
    pub log_durable_tick: Option<u64>,
    pub close_tick: Option<u64>,
    pub signal_tick: Option<u64>,
    pub finish_tick: Option<u64>,
    /// Log slot cleared by a cleanup (its data was flushed first).
    pub cleaned_tick: Option<u64>,
    /// Position in the global commit order.
    pub commit_seq: Option<u32>,
    pub read_set: BTreeSet<Address>,
    pub write_set: BTreeSet<Address>,
    /// Home-region stores of the committed attempt, in program order.
    pub writes: Vec<(Address, LineValue)>,
    pub reads: Vec<ReadObservation>,
    pub fallback: bool,
    pub aborts: u32,
    /// Simulated cycles from first step to finish.
    pub latency: Option<u64>,
}

impl WrapRecord {
    pub fn committed(&self) -> bool {
        self.commit_seq.is_some()
    }

    pub fn committed_by(&self, tick: u64) -> bool {
        self.commit_tick.is_some_and(|t| t <= tick)
    }

    /// Final value written to each address, in address order.
    pub fn last_writes(&self) -> Vec<(Address, LineValue)> {
        let mut m = std::collections::BTreeMap::new();
        for &(a, v) in &self.writes {
            m.insert(a, v);
        }
        m.into_iter().collect()
    }
}

/// Labeled snapshot of controller state taken by a scripted schedule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub label: String,
    pub tick: u64,
    pub controller: ControllerDump,
    /// Home addresses drained from the delay buffer since the previous checkpoint.
    pub drained: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub method: Method,
    pub threads: usize,
    pub events: Vec<SimEvent>,
    pub pm_writes: Vec<PmWrite>,
    pub wraps: Vec<WrapRecord>,
    pub checkpoints: Vec<Checkpoint>,
    /// Every timestamp issued, in issue order.
    pub timestamps: Vec<Timestamp>,
    pub initial_image: PmImage,
    pub final_image: PmImage,
    /// Home region as a reader sees it at the end: cache over buffers over PM.
    pub final_memory: Vec<LineValue>,
    /// Tick of the crash event, if one fired.
    pub crashed: Option<u64>,
    pub abort_stats: AbortStats,
    pub max_vdb_depth: usize,
    pub max_dwq_depth: usize,
    pub final_vdb_len: usize,
    pub final_dwq_len: usize,
    /// Most wraps simultaneously open at the controller.
    pub max_open_wraps: usize,
    /// Per-thread simulated cycle clocks at the end of the run.
    pub thread_clocks: Vec<u64>,
    /// PTL writes counted per kind: (undo persists, data flushes).
    pub ptl_pm_writes: (u64, u64),
}

impl Trace {
    /// Tick of the last non-crash event.
    pub fn last_tick(&self) -> u64 {
        self.events
            .iter()
            .rev()
            .find(|e| !matches!(e.kind, EventKind::Crash))
            .map_or(0, |e| e.tick)
    }

    pub fn committed(&self) -> impl Iterator<Item = &WrapRecord> {
        self.wraps.iter().filter(|w| w.committed())
    }

    /// Committed transactions sorted by commit order.
    pub fn commit_order(&self) -> Vec<&WrapRecord> {
        let mut v: Vec<&WrapRecord> = self.committed().collect();
        v.sort_by_key(|w| w.commit_seq);
        v
    }

    pub fn record(&self, txn: TxnId) -> Option<&WrapRecord> {
        self.wraps.get(txn.0 as usize).filter(|w| w.txn == txn)
    }

    pub fn committed_count(&self) -> usize {
        self.committed().count()
    }

    /// Simulated makespan: the slowest thread's clock.
    pub fn makespan(&self) -> u64 {
        self.thread_clocks.iter().copied().max().unwrap_or(0)
    }

    /// Writes the event log as JSON lines.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.events {
            let line = serde_json::to_string(e).map_err(|e| Error::Io(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Stable digest of the event log and PM write sequence.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        serde_json::to_string(&self.events).unwrap_or_default().hash(&mut h);
        for w in &self.pm_writes {
            (w.tick, w.addr.0, w.value).hash(&mut h);
        }
        self.final_image.hash(&mut h);
        h.finish()
    }
}

/// Persistent state left behind by a crash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashedState {
    pub tick: u64,
    pub image: PmImage,
}

/// Persistent memory exactly as of `tick` events: the initial image plus
/// every PM write issued at or before that tick. Volatile state is gone.
pub fn inject_crash(trace: &Trace, tick: u64) -> Result<CrashedState> {
    let last = trace.last_tick();
    if tick > last {
        return Err(Error::OutOfRange { tick, last });
    }
    let mut image = trace.initial_image.clone();
    for w in trace.pm_writes.iter().take_while(|w| w.tick <= tick) {
        image.write(w.addr, w.value);
    }
    Ok(CrashedState { tick, image })
}
