//! Deterministic simulator for durable hardware transactions on persistent
//! memory using write-aside persistence (WrAP).
//!
//! The crate models the volatile cache, an HTM unit with a fallback lock,
//! the persistent memory controller with its delay buffer, the WrAP
//! transaction library, an undo-logging baseline, crash injection, the
//! recovery procedure, and an oracle checker for crash consistency.

pub mod checker;
pub mod controller;
pub mod domain;
pub mod engine;
pub mod error;
pub mod explore;
pub mod golden;
pub mod htm;
pub mod log_layout;
pub mod memory;
pub mod protocol;
pub mod ptl;
pub mod recovery;
pub mod workload;

pub use controller::{ControllerDump, ControllerMode, PmController, VdbEntry};
pub use domain::{
    depset_is_empty, depset_remove, Address, AddressMap, Clock, DependencySet, LineValue,
    LogRecord, Region, Timestamp, TxnId, WrapId, MAX_WRAPS,
};
pub use engine::{
    inject_crash, run, run_with_chooser, CrashPolicy, CrashedState, Interleaving, LatencyModel,
    Method, Milestone, ProgramItem, Schedule, ScriptAction, SimConfig, StrictMode, ThreadProgram,
    Trace, TxMem, TxSpec, Workload,
};
pub use error::{Error, Result};
pub use htm::{AbortStats, ConflictPolicy};
pub use memory::{CacheModel, PmImage};
pub use ptl::{ptl_recover, PtlRecovery};
pub use recovery::{recover, recover_with, RecordId, RecordSummary, RecoveryReport, TminRule};
pub use checker::{
    check_all_ticks, check_crash_consistency, check_lemmas, consistent_states, Oracle, Verdict,
    Violation, ViolationKind, SCALE_LIMIT,
};
