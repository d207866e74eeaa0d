//! Deterministic discrete-event engine.
//!
//! Simulated threads are resumable step machines. At every tick the
//! scheduler either advances one thread by a step or evicts a dirty cache
//! line; an optional crash ends the run. All nondeterminism comes from the
//! [`Schedule`] (seeded RNG, scripted actions, or an external chooser), so a
//! run is a pure function of workload, configuration and schedule.

mod chooser;
pub(crate) mod machine;
mod trace;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::controller::ControllerMode;
use crate::domain::{Address, LineValue};
use crate::error::Result;
use crate::htm::ConflictPolicy;

pub use chooser::{Action, ChoiceView, Chooser, DfsChooser, RandomChooser, TimedChooser};
pub use machine::Machine;
pub use trace::{
    inject_crash, Checkpoint, CrashedState, EventKind, PmWrite, PmWriteKind, ReadObservation,
    SimEvent, StepOp, Trace, WrapRecord,
};

/// Persistence scheme driving each transaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    /// WrAP; each transaction chooses its own durability.
    Wrap,
    /// WrAP with strict durability forced on every transaction.
    WrapStrict,
    /// Bare HTM, no logging and no persistence ordering.
    HtmOnly,
    /// Persistent two-phase locking with eagerly persisted undo logs.
    PtlEager,
}

impl Method {
    pub fn uses_wrap(self) -> bool {
        matches!(self, Method::Wrap | Method::WrapStrict)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Wrap => "wrap",
            Method::WrapStrict => "wrap-strict",
            Method::HtmOnly => "htm-only",
            Method::PtlEager => "ptl-eager",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "wrap" => Ok(Method::Wrap),
            "wrap-strict" => Ok(Method::WrapStrict),
            "htm-only" | "htm" => Ok(Method::HtmOnly),
            "ptl-eager" | "ptl" => Ok(Method::PtlEager),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Where strict-durability waits are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum StrictMode {
    /// Dependency wait queue in the controller signals a mailbox.
    #[default]
    Controller,
    /// The library scans per-thread status lines.
    Software,
}

/// Abstract cycle costs charged to the acting thread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub cache_access: u64,
    pub memory_read: u64,
    pub dram_write: u64,
    /// Persistent-memory write latency as a multiple of `dram_write`.
    pub pm_write_multiplier: u64,
    /// Cost of a flushed line that continues the previous line's burst.
    pub line_transfer: u64,
    pub fence: u64,
    pub controller_notify: u64,
    pub htm_begin_end: u64,
    pub backoff_unit: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            cache_access: 1,
            memory_read: 10,
            dram_write: 10,
            pm_write_multiplier: 1,
            line_transfer: 2,
            fence: 5,
            controller_notify: 5,
            htm_begin_end: 5,
            backoff_unit: 10,
        }
    }
}

impl LatencyModel {
    pub fn pm_write(&self) -> u64 {
        self.dram_write * self.pm_write_multiplier
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub method: Method,
    pub home_lines: u64,
    pub cache_capacity: usize,
    /// Speculatively written lines one section may pin.
    pub htm_write_capacity: usize,
    /// Log record slots per wrap before a cleanup is forced.
    pub slots_per_wrap: u32,
    /// Write-set entries per log record.
    pub ws_capacity: u32,
    pub conflict_policy: ConflictPolicy,
    /// Speculative attempts before falling back to the global lock.
    pub retry_threshold: u32,
    pub strict_mode: StrictMode,
    pub controller_mode: ControllerMode,
    /// Mutation: skip the fences of the log phase.
    pub skip_log_fence: bool,
    pub latency: LatencyModel,
    /// Hard stop for runaway runs.
    pub max_ticks: u64,
    /// Keep the event log and PM write list (needed for crash injection).
    pub full_trace: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            method: Method::Wrap,
            home_lines: 64,
            cache_capacity: 1024,
            htm_write_capacity: 512,
            slots_per_wrap: 256,
            ws_capacity: 64,
            conflict_policy: ConflictPolicy::RequesterWins,
            retry_threshold: 8,
            strict_mode: StrictMode::Controller,
            controller_mode: ControllerMode::Delayed,
            skip_log_fence: false,
            latency: LatencyModel::default(),
            max_ticks: 50_000_000,
            full_trace: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CrashPolicy {
    None,
    /// Crash once `n` events have executed (0 = before the first).
    AtTick(u64),
    /// Crash before each event with this probability (separate RNG stream).
    Random { probability: f64 },
}

/// Points in a thread's transaction lifecycle a script can run up to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Milestone {
    /// Opened at the controller and start time durable; next step begins HTM.
    Opened,
    /// HTM section committed.
    Committed,
    /// Persist timestamp line durable.
    PersistDurable,
    /// Whole log record, end marker included, durable.
    LogDurable,
    /// Close notified to the controller.
    Closed,
    /// Current transaction finished (including any durability wait).
    Finished,
    /// Thread has no more work.
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScriptAction {
    /// Runs thread micro-steps until the milestone holds.
    RunUntil(usize, Milestone),
    /// One micro-step of the thread.
    Step(usize),
    Evict(Address),
    /// Records a labeled controller snapshot in the trace.
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Interleaving {
    /// Uniform choice among runnable threads.
    Random,
    /// Earliest thread-local cycle clock first; used for latency metrics.
    Timed,
    /// Explicit actions; threads left unfinished run to completion in order.
    Scripted(Vec<ScriptAction>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub seed: u64,
    pub eviction_rate: f64,
    pub crash: CrashPolicy,
    pub interleaving: Interleaving,
}

impl Schedule {
    pub fn random(seed: u64, eviction_rate: f64) -> Self {
        Self {
            seed,
            eviction_rate,
            crash: CrashPolicy::None,
            interleaving: Interleaving::Random,
        }
    }

    pub fn timed(seed: u64, eviction_rate: f64) -> Self {
        Self {
            interleaving: Interleaving::Timed,
            ..Self::random(seed, eviction_rate)
        }
    }

    pub fn scripted(actions: Vec<ScriptAction>) -> Self {
        Self {
            seed: 0,
            eviction_rate: 0.0,
            crash: CrashPolicy::None,
            interleaving: Interleaving::Scripted(actions),
        }
    }

    pub fn with_crash(mut self, crash: CrashPolicy) -> Self {
        self.crash = crash;
        self
    }
}

/// Signal used by transaction bodies to yield at an access that has not
/// been scheduled yet. Bodies propagate it with `?`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Suspend;

/// Memory interface seen by transaction bodies.
pub trait TxMem {
    fn read(&mut self, addr: Address) -> std::result::Result<LineValue, Suspend>;
    fn write(&mut self, addr: Address, value: LineValue) -> std::result::Result<(), Suspend>;
}

/// A transaction body. It must be deterministic in the values it reads:
/// the engine re-executes it from the start to resume at each access.
pub type TxBody =
    Arc<dyn Fn(&mut dyn TxMem) -> std::result::Result<(), Suspend> + Send + Sync>;

#[derive(Clone)]
pub struct TxSpec {
    pub label: String,
    pub body: TxBody,
    /// Request strict durability (ignored outside WrAP methods).
    pub strict: bool,
}

impl TxSpec {
    pub fn new(
        label: impl Into<String>,
        body: impl Fn(&mut dyn TxMem) -> std::result::Result<(), Suspend> + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            body: Arc::new(body),
            strict: false,
        }
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }
}

impl fmt::Debug for TxSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TxSpec")
            .field("label", &self.label)
            .field("strict", &self.strict)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum ProgramItem {
    Tx(TxSpec),
    /// Quiesce and clear the log area.
    Cleanup,
}

#[derive(Debug, Clone, Default)]
pub struct ThreadProgram {
    pub items: Vec<ProgramItem>,
}

impl ThreadProgram {
    pub fn new(txs: impl IntoIterator<Item = TxSpec>) -> Self {
        Self {
            items: txs.into_iter().map(ProgramItem::Tx).collect(),
        }
    }

    pub fn tx_count(&self) -> usize {
        self.items
            .iter()
            .filter(|i| matches!(i, ProgramItem::Tx(_)))
            .count()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Workload {
    pub threads: Vec<ThreadProgram>,
    /// Home-region contents before the run.
    pub initial_home: Vec<(Address, LineValue)>,
}

impl Workload {
    pub fn tx_count(&self) -> usize {
        self.threads.iter().map(ThreadProgram::tx_count).sum()
    }
}

/// Runs the workload under the schedule's own interleaving policy.
pub fn run(workload: &Workload, config: &SimConfig, schedule: &Schedule) -> Result<Trace> {
    Machine::new(workload, config, schedule)?.run()
}

/// Runs with an external chooser (used by exhaustive exploration).
///
/// In this mode a `Step` action advances the thread to its next visible
/// operation, skipping steps that only touch its private log lines.
pub fn run_with_chooser(
    workload: &Workload,
    config: &SimConfig,
    schedule: &Schedule,
    chooser: &mut dyn Chooser,
) -> Result<Trace> {
    Machine::new(workload, config, schedule)?.run_with(chooser)
}
