//! Simulator state and the event loop shared by every method.
//!
//! Protocol-specific step logic lives in `crate::protocol` (WrAP, bare HTM,
//! log cleanup) and `crate::ptl` (the undo-logging baseline); both extend
//! [`Machine`] with further `impl` blocks.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{PmController, WriteOutcome};
use crate::domain::{Address, AddressMap, Clock, LineValue, Timestamp, TxnId, WrapId, MAX_WRAPS};
use crate::error::{Error, Result};
use crate::htm::{AccessKind, AccessVerdict, FallbackLock, HtmSection, HtmUnit};
use crate::log_layout::LogGeometry;
use crate::memory::{CacheModel, PmImage};

use super::chooser::{Action, ChoiceView, Chooser, RandomChooser, TimedChooser};
use super::trace::{
    Checkpoint, EventKind, PmWrite, PmWriteKind, ReadObservation, SimEvent, StepOp, Trace,
    WrapRecord,
};
use super::{
    CrashPolicy, Interleaving, Method, Milestone, ProgramItem, Schedule, ScriptAction, SimConfig,
    StrictMode, Suspend, TxMem, TxSpec, Workload,
};

/// One body access of the current attempt, with the value read or written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Access {
    pub addr: Address,
    pub write: bool,
    pub value: LineValue,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Phase {
    /// WrAP: register at the controller and persist the log header.
    Open,
    /// Write back one staged line per step, then continue with the phase.
    Fence(Box<Phase>),
    Begin,
    Body,
    WriteEnd,
    Close,
    StrictWait,
    SoftStrictWait,
    Backoff { remaining: u32 },
    AcquireLock,
    CleanupRequest,
    CleanupWait,
    /// Slots still to clear; the flag is set once the header is zero.
    CleanupClear(VecDeque<(WrapId, u32, bool)>),
    PtlBegin,
    PtlBody,
    PtlCommit,
    PtlClear,
    PtlAbortClear,
    Done,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Milestones {
    pub opened: bool,
    pub committed: bool,
    pub persist_durable: bool,
    pub log_durable: bool,
    pub closed: bool,
    pub finished: bool,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct PtlTx {
    pub seq: u32,
    pub header_written: bool,
    pub locks: Vec<Address>,
    pub read_versions: HashMap<Address, u64>,
    /// Undo entries `(addr, old value)` in log order.
    pub undo: Vec<(Address, LineValue)>,
}

#[derive(Debug, Clone)]
pub(crate) struct TxState {
    pub spec: TxSpec,
    pub txn: TxnId,
    pub strict: bool,
    pub wrap: Option<WrapId>,
    pub slot: u32,
    pub start: Option<Timestamp>,
    pub retry: u32,
    pub fallback: bool,
    pub replay: Vec<Access>,
    pub pending_store: Option<(Address, LineValue)>,
    /// Write-set entries appended to the log by the current attempt.
    pub log: Vec<(Address, LineValue)>,
    /// Private buffer of a lock-holding (non-speculative) attempt.
    pub fbuf: BTreeMap<Address, LineValue>,
    pub started_clock: Option<u64>,
    pub ptl: PtlTx,
}

#[derive(Debug, Clone)]
pub(crate) struct ThreadState {
    pub items: Vec<ProgramItem>,
    pub pc: usize,
    pub phase: Phase,
    pub tx: Option<TxState>,
    pub staged: VecDeque<Address>,
    pub last_flushed: Option<Address>,
    pub clock: u64,
    pub mailbox: bool,
    pub next_slot: u32,
    pub slots_used: u32,
    /// Status line read by software strict durability: start time of the
    /// wrap this thread has open, if any.
    pub open_start: Option<Timestamp>,
    pub ms: Milestones,
    /// A cleanup forced by a full log ring resumes the pending open.
    pub cleanup_resume: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct PtlLock {
    pub owner: Option<usize>,
    pub version: u64,
}

struct Recorder<'a> {
    replay: &'a [Access],
    pos: usize,
    next: Option<Access>,
}

impl TxMem for Recorder<'_> {
    fn read(&mut self, addr: Address) -> std::result::Result<LineValue, Suspend> {
        if let Some(a) = self.replay.get(self.pos) {
            debug_assert!(a.addr == addr && !a.write, "non-deterministic transaction body");
            self.pos += 1;
            return Ok(a.value);
        }
        self.next = Some(Access {
            addr,
            write: false,
            value: 0,
        });
        Err(Suspend)
    }

    fn write(&mut self, addr: Address, value: LineValue) -> std::result::Result<(), Suspend> {
        if let Some(a) = self.replay.get(self.pos) {
            debug_assert!(a.addr == addr && a.write, "non-deterministic transaction body");
            self.pos += 1;
            return Ok(());
        }
        self.next = Some(Access {
            addr,
            write: true,
            value,
        });
        Err(Suspend)
    }
}

/// Where the next body step of a transaction leads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum NextAccess {
    Access(Access),
    Finished,
}

pub struct Machine {
    pub(crate) cfg: SimConfig,
    schedule: Schedule,
    pub(crate) map: AddressMap,
    pub(crate) geom: LogGeometry,
    pub(crate) clock: Clock,
    pub(crate) tick: u64,
    pub(crate) cache: CacheModel,
    pub(crate) ctrl: PmController,
    pub(crate) htm: HtmUnit,
    pub(crate) threads: Vec<ThreadState>,
    pub(crate) rng: ChaCha8Rng,
    crash_rng: ChaCha8Rng,
    pub(crate) trace: Trace,
    pub(crate) next_commit: u32,
    pub(crate) quiesce_owner: Option<usize>,
    /// Log slots holding records, with the transaction that wrote each.
    pub(crate) used_slots: Vec<(WrapId, u32, TxnId)>,
    pub(crate) locks: HashMap<Address, PtlLock>,
    pub(crate) ptl_seq: u32,
    drained_since: Vec<u64>,
    /// Simulated time of the most recent thread step.
    now_cycles: u64,
}

impl Machine {
    pub fn new(workload: &Workload, config: &SimConfig, schedule: &Schedule) -> Result<Self> {
        let n = workload.threads.len();
        if n == 0 {
            return Err(Error::Config("workload has no threads".into()));
        }
        if n > MAX_WRAPS {
            return Err(Error::Config(format!(
                "{n} threads exceed MAX_WRAPS ({MAX_WRAPS})"
            )));
        }
        if config.home_lines == 0 || config.slots_per_wrap == 0 || config.ws_capacity == 0 {
            return Err(Error::Config(
                "home_lines, slots_per_wrap and ws_capacity must be positive".into(),
            ));
        }
        if config.ws_capacity > 0xffff {
            return Err(Error::Config("ws_capacity must fit 16 bits".into()));
        }
        if !(0.0..=1.0).contains(&schedule.eviction_rate) {
            return Err(Error::Config("eviction rate must lie in [0, 1]".into()));
        }
        let geom = LogGeometry::new(n as u32, config.slots_per_wrap, config.ws_capacity);
        let mut image = PmImage::new(config.home_lines, geom);
        let map = image.address_map();
        for &(a, v) in &workload.initial_home {
            if !map.is_home(a) {
                return Err(Error::BadAddress(a));
            }
            image.write(a, v);
        }
        let threads = workload
            .threads
            .iter()
            .map(|p| ThreadState {
                items: p.items.clone(),
                pc: 0,
                phase: Phase::Done,
                tx: None,
                staged: VecDeque::new(),
                last_flushed: None,
                clock: 0,
                mailbox: false,
                next_slot: 0,
                slots_used: 0,
                open_start: None,
                ms: Milestones::default(),
                cleanup_resume: false,
            })
            .collect();
        let trace = Trace {
            method: config.method,
            threads: n,
            events: Vec::new(),
            pm_writes: Vec::new(),
            wraps: Vec::new(),
            checkpoints: Vec::new(),
            timestamps: Vec::new(),
            initial_image: image.clone(),
            final_image: image.clone(),
            final_memory: Vec::new(),
            crashed: None,
            abort_stats: Default::default(),
            max_vdb_depth: 0,
            max_dwq_depth: 0,
            final_vdb_len: 0,
            final_dwq_len: 0,
            max_open_wraps: 0,
            thread_clocks: vec![0; n],
            ptl_pm_writes: (0, 0),
        };
        let mut m = Self {
            cfg: config.clone(),
            schedule: schedule.clone(),
            map,
            geom,
            clock: Clock::new(),
            tick: 0,
            cache: CacheModel::new(config.cache_capacity),
            ctrl: PmController::new(image, config.controller_mode),
            htm: HtmUnit::new(n, config.conflict_policy),
            threads,
            rng: ChaCha8Rng::seed_from_u64(schedule.seed ^ 0x9e37_79b9_7f4a_7c15),
            crash_rng: ChaCha8Rng::seed_from_u64(schedule.seed ^ 0xc2b2_ae3d_27d4_eb4f),
            trace,
            next_commit: 0,
            quiesce_owner: None,
            used_slots: Vec::new(),
            locks: HashMap::new(),
            ptl_seq: 0,
            drained_since: Vec::new(),
            now_cycles: 0,
        };
        for t in 0..n {
            m.advance_program(t);
        }
        Ok(m)
    }

    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn controller(&self) -> &PmController {
        &self.ctrl
    }

    pub fn cache(&self) -> &CacheModel {
        &self.cache
    }

    pub fn is_done(&self, t: usize) -> bool {
        self.threads[t].phase == Phase::Done
    }

    pub fn all_done(&self) -> bool {
        self.threads.iter().all(|th| th.phase == Phase::Done)
    }

    // ----- program sequencing -----

    pub(crate) fn method(&self) -> Method {
        self.cfg.method
    }

    /// Installs the thread's next program item.
    pub(crate) fn advance_program(&mut self, t: usize) {
        loop {
            let th = &self.threads[t];
            let Some(item) = th.items.get(th.pc).cloned() else {
                self.threads[t].phase = Phase::Done;
                return;
            };
            match item {
                ProgramItem::Cleanup => {
                    if self.method().uses_wrap() {
                        self.threads[t].cleanup_resume = false;
                        self.threads[t].phase = Phase::CleanupRequest;
                        return;
                    }
                    self.threads[t].pc += 1;
                }
                ProgramItem::Tx(spec) => {
                    self.install_tx(t, spec);
                    return;
                }
            }
        }
    }

    fn install_tx(&mut self, t: usize, spec: TxSpec) {
        let txn = TxnId(self.trace.wraps.len() as u32);
        let strict = match self.method() {
            Method::WrapStrict => true,
            Method::Wrap => spec.strict,
            _ => false,
        };
        let wrap = self
            .method()
            .uses_wrap()
            .then(|| WrapId::new(t).expect("thread count checked against MAX_WRAPS"));
        self.trace.wraps.push(WrapRecord {
            txn,
            thread: t,
            label: spec.label.clone(),
            wrap,
            strict,
            ..Default::default()
        });
        self.threads[t].tx = Some(TxState {
            spec,
            txn,
            strict,
            wrap,
            slot: 0,
            start: None,
            retry: 0,
            fallback: false,
            replay: Vec::new(),
            pending_store: None,
            log: Vec::new(),
            fbuf: BTreeMap::new(),
            started_clock: None,
            ptl: PtlTx::default(),
        });
        self.threads[t].phase = match self.method() {
            Method::Wrap | Method::WrapStrict => Phase::Open,
            Method::HtmOnly => Phase::Begin,
            Method::PtlEager => Phase::PtlBegin,
        };
    }

    /// Completes the current transaction and moves to the next item.
    pub(crate) fn finish_tx(&mut self, t: usize) {
        let th = &mut self.threads[t];
        let tx = th.tx.take().expect("finish without transaction");
        th.ms.finished = true;
        th.pc += 1;
        let clock = th.clock;
        let rec = &mut self.trace.wraps[tx.txn.0 as usize];
        rec.finish_tick = Some(self.tick);
        rec.latency = tx.started_clock.map(|s| clock - s);
        self.advance_program(t);
    }

    pub(crate) fn tx(&self, t: usize) -> &TxState {
        self.threads[t].tx.as_ref().expect("no current transaction")
    }

    pub(crate) fn tx_mut(&mut self, t: usize) -> &mut TxState {
        self.threads[t].tx.as_mut().expect("no current transaction")
    }

    pub(crate) fn record_mut(&mut self, txn: TxnId) -> &mut WrapRecord {
        &mut self.trace.wraps[txn.0 as usize]
    }

    pub(crate) fn now(&mut self) -> Timestamp {
        let ts = self.clock.now();
        self.trace.timestamps.push(ts);
        ts
    }

    pub(crate) fn charge(&mut self, t: usize, cycles: u64) {
        self.threads[t].clock += cycles;
    }

    /// Runs the body against the replay log to find its next access.
    pub(crate) fn peek_next(&self, t: usize) -> Result<NextAccess> {
        let tx = self.tx(t);
        let mut rec = Recorder {
            replay: &tx.replay,
            pos: 0,
            next: None,
        };
        let outcome = (tx.spec.body)(&mut rec);
        match (outcome, rec.next) {
            (Ok(()), None) => Ok(NextAccess::Finished),
            (Err(Suspend), Some(a)) => {
                if !self.map.is_home(a.addr) {
                    return Err(Error::BadAddress(a.addr));
                }
                Ok(NextAccess::Access(a))
            }
            _ => Err(Error::ProtocolViolation(format!(
                "transaction `{}` suspended outside an access",
                tx.spec.label
            ))),
        }
    }

    /// Fills the read/write bookkeeping of a committing attempt.
    pub(crate) fn record_commit(&mut self, t: usize) {
        let seq = self.next_commit;
        self.next_commit += 1;
        let tick = self.tick;
        let tx = self.tx(t);
        let txn = tx.txn;
        let fallback = tx.fallback;
        let mut written = BTreeSet::new();
        let mut reads = Vec::new();
        let mut read_set = BTreeSet::new();
        let mut writes = Vec::new();
        for a in &tx.replay {
            if a.write {
                written.insert(a.addr);
                writes.push((a.addr, a.value));
            } else {
                read_set.insert(a.addr);
                if !written.contains(&a.addr) {
                    reads.push(ReadObservation {
                        addr: a.addr,
                        value: a.value,
                    });
                }
            }
        }
        let rec = self.record_mut(txn);
        rec.commit_seq = Some(seq);
        rec.commit_tick = Some(tick);
        rec.read_set = read_set;
        rec.write_set = written;
        rec.writes = writes;
        rec.reads = reads;
        rec.fallback = fallback;
        self.threads[t].ms.committed = true;
    }

    // ----- memory paths -----

    pub(crate) fn record_drained(&mut self, entries: Vec<crate::controller::VdbEntry>) {
        for e in entries {
            self.record_pm_write(e.addr, e.data, e.provenance, PmWriteKind::Drain);
        }
    }

    fn record_pm_write(&mut self, addr: Address, value: LineValue, provenance: Option<TxnId>, kind: PmWriteKind) {
        if kind == PmWriteKind::Drain {
            self.drained_since.push(addr.0);
        }
        if self.cfg.full_trace {
            self.trace.pm_writes.push(PmWrite {
                tick: self.tick,
                addr,
                value,
                provenance,
                kind,
            });
        }
    }

    /// Hands a written-back line to the controller and records what reached PM.
    pub(crate) fn deliver(&mut self, addr: Address, value: LineValue, provenance: Option<TxnId>, kind: PmWriteKind) -> bool {
        let (outcome, drained) = self.ctrl.memory_write(addr, value, provenance);
        if outcome == WriteOutcome::Persisted {
            self.record_pm_write(addr, value, provenance, kind);
        }
        self.record_drained(drained);
        outcome == WriteOutcome::Buffered
    }

    /// Drops a line from the cache, writing it back if dirty.
    pub(crate) fn evict_line(&mut self, addr: Address) -> bool {
        match self.cache.remove(addr) {
            Some(l) if l.dirty => self.deliver(addr, l.value, l.provenance, PmWriteKind::Evict),
            _ => false,
        }
    }

    /// Makes room for one more line. Fails only when every line is pinned.
    fn make_room(&mut self) -> bool {
        while self.cache.is_full() {
            let n = self.cache.unpinned().len();
            if n == 0 {
                return false;
            }
            let victim = self.cache.unpinned()[self.rng.gen_range(0..n)];
            self.evict_line(victim);
        }
        true
    }

    /// Brings `addr` into the cache. `fetch` loads the current value; a
    /// full-line overwrite skips the memory read.
    pub(crate) fn ensure_resident(&mut self, t: usize, addr: Address, fetch: bool) -> bool {
        if self.cache.contains(addr) {
            self.charge(t, self.cfg.latency.cache_access);
            return true;
        }
        // Only speculative lines left: sections abort, other traffic overflows.
        if !self.make_room() && self.htm.in_section(t) {
            return false;
        }
        let (value, prov) = self.ctrl.memory_read(addr);
        let cost = if fetch && self.map.is_home(addr) {
            self.cfg.latency.memory_read
        } else {
            self.cfg.latency.cache_access
        };
        self.charge(t, cost);
        self.cache.fill(addr, value, prov);
        true
    }

    /// Committed value of a home line as seen by a non-speculative reader.
    pub(crate) fn load(&mut self, t: usize, addr: Address) -> LineValue {
        self.ensure_resident(t, addr, true);
        self.cache.get(addr).map_or(0, |l| l.value)
    }

    /// Non-speculative store (log lines, lock-holder publication, PTL).
    pub(crate) fn store(&mut self, t: usize, addr: Address, value: LineValue, provenance: Option<TxnId>) {
        let fetch = self.map.is_home(addr);
        self.ensure_resident(t, addr, fetch);
        self.cache.store(addr, value, provenance);
    }

    /// Store that reaches persistent memory before the step ends.
    pub(crate) fn store_through(&mut self, t: usize, addr: Address, value: LineValue, provenance: Option<TxnId>) {
        self.store(t, addr, value, provenance);
        if let Some(l) = self.cache.clean(addr) {
            self.deliver(addr, l.value, l.provenance, PmWriteKind::Flush);
        }
        self.charge(t, self.cfg.latency.pm_write() + self.cfg.latency.fence);
    }

    /// Aborts every section in `victims` and resets their threads.
    pub(crate) fn apply_verdict(&mut self, verdict: AccessVerdict) {
        for s in verdict.aborted {
            self.reset_aborted(s);
        }
        if let Some(s) = verdict.requester_aborted {
            self.reset_aborted(s);
        }
    }

    /// Rolls a thread back to a retry after its section aborted.
    pub(crate) fn reset_aborted(&mut self, s: HtmSection) {
        for a in &s.write_set {
            self.cache.unpin(*a);
        }
        let t = s.owner;
        let threshold = self.cfg.retry_threshold;
        let tx = self.tx_mut(t);
        tx.replay.clear();
        tx.pending_store = None;
        tx.log.clear();
        tx.retry += 1;
        let retry = tx.retry;
        let txn = tx.txn;
        self.record_mut(txn).aborts += 1;
        if retry > threshold {
            self.threads[t].phase = Phase::AcquireLock;
        } else {
            self.start_backoff(t, retry);
        }
    }

    pub(crate) fn start_backoff(&mut self, t: usize, retry: u32) {
        let span = 1u32 << retry.min(8);
        let remaining = self.rng.gen_range(1..=span);
        self.threads[t].phase = Phase::Backoff { remaining };
    }

    /// Transactional read; `None` if the reader's own section aborted.
    pub(crate) fn tx_read(&mut self, t: usize, addr: Address) -> Option<LineValue> {
        let tx = self.tx(t);
        if tx.fallback {
            if let Some(v) = tx.fbuf.get(&addr).copied() {
                self.charge(t, self.cfg.latency.cache_access);
                return Some(v);
            }
            let verdict = self.htm.access(t, addr, AccessKind::Read);
            self.apply_verdict(verdict);
            return Some(self.load(t, addr));
        }
        let verdict = self.htm.access(t, addr, AccessKind::Read);
        let self_aborted = verdict.requester_aborted.is_some();
        self.apply_verdict(verdict);
        if self_aborted {
            return None;
        }
        if let Some(v) = self.htm.own_value(t, addr) {
            self.charge(t, self.cfg.latency.cache_access);
            return Some(v);
        }
        if !self.ensure_resident(t, addr, true) {
            let s = self.htm.count_capacity_abort(t).expect("section active");
            self.capacity_abort(s);
            return None;
        }
        Some(self.cache.get(addr).map_or(0, |l| l.value))
    }

    /// Transactional store; `false` if the writer's own section aborted.
    pub(crate) fn tx_write(&mut self, t: usize, addr: Address, value: LineValue) -> bool {
        if self.tx(t).fallback {
            let verdict = self.htm.access(t, addr, AccessKind::Write);
            self.apply_verdict(verdict);
            self.charge(t, self.cfg.latency.cache_access);
            self.tx_mut(t).fbuf.insert(addr, value);
            return true;
        }
        let verdict = self.htm.access(t, addr, AccessKind::Write);
        let self_aborted = verdict.requester_aborted.is_some();
        self.apply_verdict(verdict);
        if self_aborted {
            return false;
        }
        let over = self
            .htm
            .section(t)
            .is_some_and(|s| s.write_set.len() > self.cfg.htm_write_capacity);
        if over || !self.ensure_resident(t, addr, self.map.is_home(addr)) {
            let s = self.htm.count_capacity_abort(t).expect("section active");
            self.capacity_abort(s);
            return false;
        }
        self.cache.pin(addr, t);
        self.htm.buffer_write(t, addr, value);
        true
    }

    /// A capacity abort will recur, so the retry goes straight to the lock.
    fn capacity_abort(&mut self, s: HtmSection) {
        let t = s.owner;
        self.reset_aborted(s);
        self.threads[t].phase = Phase::AcquireLock;
    }

    pub(crate) fn stage(&mut self, t: usize, addr: Address) {
        self.threads[t].staged.push_back(addr);
    }

    /// Writes back one staged line. Returns the line, or `None` when the
    /// fence has nothing left to wait for.
    pub(crate) fn flush_one(&mut self, t: usize) -> Option<Address> {
        let addr = self.threads[t].staged.pop_front()?;
        let lat = self.cfg.latency;
        let contiguous = self.threads[t].last_flushed.is_some_and(|p| p.0 + 1 == addr.0);
        if let Some(l) = self.cache.clean(addr) {
            self.deliver(addr, l.value, l.provenance, PmWriteKind::Flush);
            let cost = if contiguous { lat.line_transfer } else { lat.pm_write() };
            self.charge(t, cost);
        } else {
            self.charge(t, lat.cache_access);
        }
        self.threads[t].last_flushed = Some(addr);
        Some(addr)
    }

    // ----- scheduling -----

    pub fn runnable(&self, t: usize) -> bool {
        let th = &self.threads[t];
        match &th.phase {
            Phase::Done => false,
            Phase::Open | Phase::CleanupRequest => self.quiesce_owner.is_none_or(|o| o == t),
            Phase::AcquireLock | Phase::Begin => self.htm.lock() == FallbackLock::Free,
            Phase::StrictWait => th.mailbox,
            Phase::SoftStrictWait => self.soft_strict_ready(t),
            Phase::CleanupWait => self.ctrl.cot().is_empty(),
            _ => true,
        }
    }

    /// No other thread has a wrap open that started before our persist time.
    fn soft_strict_ready(&self, t: usize) -> bool {
        let persist = self
            .threads[t]
            .tx
            .as_ref()
            .and_then(|tx| self.trace.wraps[tx.txn.0 as usize].persist_ts);
        let Some(p) = persist else { return true };
        self.threads
            .iter()
            .enumerate()
            .all(|(u, th)| u == t || th.open_start.is_none_or(|s| s > p))
    }

    fn runnable_list(&self) -> Vec<usize> {
        (0..self.threads.len()).filter(|&t| self.runnable(t)).collect()
    }

    /// Whether the thread's next step touches state other threads can see.
    /// Exhaustive exploration only branches before such steps.
    pub fn next_step_visible(&self, t: usize) -> bool {
        let th = &self.threads[t];
        match &th.phase {
            Phase::Fence(_) => th
                .staged
                .front()
                .is_some_and(|a| self.map.is_home(*a)),
            Phase::Backoff { .. } | Phase::WriteEnd | Phase::StrictWait | Phase::SoftStrictWait => false,
            Phase::Body => {
                let Some(tx) = th.tx.as_ref() else { return true };
                if tx.pending_store.is_some() || !self.method().uses_wrap() {
                    return true;
                }
                !matches!(self.peek_next(t), Ok(NextAccess::Access(a)) if a.write)
            }
            _ => true,
        }
    }

    /// Executes one micro-step of thread `t` as a trace event.
    pub fn step(&mut self, t: usize) -> Result<()> {
        if !self.runnable(t) {
            return Err(Error::ProtocolViolation(format!("thread {t} is not runnable")));
        }
        self.tick += 1;
        if self.tick > self.cfg.max_ticks {
            return Err(Error::Deadlock(self.tick));
        }
        self.now_cycles = self.now_cycles.max(self.threads[t].clock);
        let tick = self.tick;
        let clock = self.threads[t].clock;
        if let Some(tx) = self.threads[t].tx.as_mut() {
            if tx.started_clock.is_none() {
                tx.started_clock = Some(clock);
                let txn = tx.txn;
                self.threads[t].ms = Milestones::default();
                self.record_mut(txn).begin_tick = Some(tick);
            }
        }
        let op = self.step_thread(t)?;
        self.push_event(EventKind::ThreadStep { thread: t, op });
        Ok(())
    }

    fn step_thread(&mut self, t: usize) -> Result<StepOp> {
        let phase = self.threads[t].phase.clone();
        match phase {
            Phase::Fence(next) => Ok(self.fence_step(t, *next)),
            Phase::Backoff { remaining } => {
                self.charge(t, self.cfg.latency.backoff_unit);
                self.threads[t].phase = if remaining <= 1 {
                    if self.method() == Method::PtlEager {
                        Phase::PtlBegin
                    } else {
                        Phase::Begin
                    }
                } else {
                    Phase::Backoff {
                        remaining: remaining - 1,
                    }
                };
                Ok(StepOp::Backoff)
            }
            Phase::PtlBegin | Phase::PtlBody | Phase::PtlCommit | Phase::PtlClear | Phase::PtlAbortClear => {
                self.ptl_step(t, phase)
            }
            Phase::Done => Err(Error::ProtocolViolation(format!("thread {t} already done"))),
            other => self.protocol_step(t, other),
        }
    }

    fn fence_step(&mut self, t: usize, next: Phase) -> StepOp {
        let op = match self.flush_one(t) {
            Some(addr) => {
                self.after_flush(t, addr);
                StepOp::Flush { addr }
            }
            None => StepOp::Idle,
        };
        if self.threads[t].staged.is_empty() {
            self.charge(t, self.cfg.latency.fence);
            self.threads[t].last_flushed = None;
            self.fence_done(t, next);
        } else {
            self.threads[t].phase = Phase::Fence(Box::new(next));
        }
        op
    }

    /// Milestone bookkeeping for lines of the thread's own log record.
    fn after_flush(&mut self, t: usize, addr: Address) {
        let Some(tx) = self.threads[t].tx.as_ref() else { return };
        let (Some(w), txn) = (tx.wrap, tx.txn) else { return };
        let slot = tx.slot;
        let base = self.map.log_base();
        let tick = self.tick;
        if addr.0 == base + self.geom.persist_offset(w, slot) && self.threads[t].ms.committed {
            self.threads[t].ms.persist_durable = true;
            self.record_mut(txn).persist_durable_tick.get_or_insert(tick);
        }
        if addr.0 == base + self.geom.end_offset(w, slot) && self.threads[t].ms.committed {
            self.threads[t].ms.log_durable = true;
            self.record_mut(txn).log_durable_tick.get_or_insert(tick);
        }
    }

    fn fence_done(&mut self, t: usize, next: Phase) {
        match &next {
            Phase::Begin if !self.threads[t].ms.opened => self.threads[t].ms.opened = true,
            Phase::CleanupClear(_) => {
                let tick = self.tick;
                let owners: Vec<TxnId> = self.used_slots.iter().map(|s| s.2).collect();
                for txn in owners {
                    self.record_mut(txn).cleaned_tick.get_or_insert(tick);
                }
            }
            _ => {}
        }
        self.threads[t].phase = next;
    }

    /// Evicts a dirty line as a trace event.
    pub fn evict(&mut self, addr: Address) -> Result<()> {
        if !self.cache.evictable().contains(&addr) {
            return Err(Error::ProtocolViolation(format!(
                "line {addr} is not an eviction candidate"
            )));
        }
        self.tick += 1;
        let buffered = self.evict_line(addr);
        self.push_event(EventKind::Evict { addr, buffered });
        Ok(())
    }

    fn push_event(&mut self, kind: EventKind) {
        self.trace.max_open_wraps = self.trace.max_open_wraps.max(self.ctrl.cot().len());
        if self.cfg.full_trace {
            self.trace.events.push(SimEvent {
                tick: self.tick,
                kind,
            });
        }
    }

    fn crash_due(&mut self) -> bool {
        match self.schedule.crash {
            CrashPolicy::None => false,
            CrashPolicy::AtTick(n) => self.tick >= n,
            CrashPolicy::Random { probability } => self.crash_rng.gen_bool(probability.clamp(0.0, 1.0)),
        }
    }

    fn crash(&mut self) {
        self.tick += 1;
        self.trace.crashed = Some(self.tick);
        if self.cfg.full_trace {
            self.trace.events.push(SimEvent {
                tick: self.tick,
                kind: EventKind::Crash,
            });
        }
        self.cache.clear();
    }

    /// Blocked threads wait in simulated time too.
    fn sync_blocked_clocks(&mut self) {
        let now = self.now_cycles;
        for t in 0..self.threads.len() {
            if !self.runnable(t) && !self.is_done(t) {
                let c = &mut self.threads[t].clock;
                *c = (*c).max(now);
            }
        }
    }

    pub fn milestone(&self, t: usize, m: Milestone) -> bool {
        let th = &self.threads[t];
        match m {
            Milestone::Opened => th.ms.opened,
            Milestone::Committed => th.ms.committed,
            Milestone::PersistDurable => th.ms.persist_durable,
            Milestone::LogDurable => th.ms.log_durable,
            Milestone::Closed => th.ms.closed,
            Milestone::Finished => th.ms.finished,
            Milestone::Done => th.phase == Phase::Done,
        }
    }

    /// Runs under the schedule's interleaving policy.
    pub fn run(mut self) -> Result<Trace> {
        match self.schedule.interleaving.clone() {
            Interleaving::Random => {
                let mut c = RandomChooser::new(self.schedule.seed, self.schedule.eviction_rate);
                self.drive(&mut c)?;
            }
            Interleaving::Timed => {
                let mut c = TimedChooser::new(self.schedule.seed, self.schedule.eviction_rate);
                self.drive(&mut c)?;
            }
            Interleaving::Scripted(actions) => self.run_script(&actions)?,
        }
        Ok(self.finish())
    }

    pub fn run_with(mut self, chooser: &mut dyn Chooser) -> Result<Trace> {
        self.drive(chooser)?;
        Ok(self.finish())
    }

    fn drive(&mut self, chooser: &mut dyn Chooser) -> Result<()> {
        let macro_steps = chooser.macro_steps();
        loop {
            if self.all_done() {
                return Ok(());
            }
            if self.crash_due() {
                self.crash();
                return Ok(());
            }
            let runnable = self.runnable_list();
            if runnable.is_empty() {
                return Err(Error::Deadlock(self.tick));
            }
            let clocks: Vec<u64> = self.threads.iter().map(|t| t.clock).collect();
            let view = ChoiceView {
                tick: self.tick,
                runnable: &runnable,
                evictable: self.cache.evictable(),
                map: self.map,
                clocks: &clocks,
            };
            match chooser.choose(&view) {
                Action::Step(t) if macro_steps => self.macro_step(t)?,
                Action::Step(t) => self.step(t)?,
                Action::Evict(a) => self.evict(a)?,
            }
            self.sync_blocked_clocks();
        }
    }

    /// Steps `t` through private work up to and including one visible step.
    fn macro_step(&mut self, t: usize) -> Result<()> {
        loop {
            let visible = self.next_step_visible(t);
            self.step(t)?;
            if visible || self.is_done(t) || !self.runnable(t) {
                return Ok(());
            }
        }
    }

    fn run_script(&mut self, actions: &[ScriptAction]) -> Result<()> {
        for action in actions {
            if self.crash_due() {
                self.crash();
                return Ok(());
            }
            match action {
                ScriptAction::Step(t) => self.step(*t)?,
                ScriptAction::Evict(a) => self.evict(*a)?,
                ScriptAction::RunUntil(t, m) => {
                    while !self.milestone(*t, *m) {
                        if !self.runnable(*t) {
                            return Err(Error::ProtocolViolation(format!(
                                "script stalled: thread {t} blocked before {m:?}"
                            )));
                        }
                        if self.crash_due() {
                            self.crash();
                            return Ok(());
                        }
                        self.step(*t)?;
                    }
                }
                ScriptAction::Checkpoint(label) => {
                    let dump = self.ctrl.dump(self.threads.len());
                    self.trace.checkpoints.push(Checkpoint {
                        label: label.clone(),
                        tick: self.tick,
                        controller: dump,
                        drained: std::mem::take(&mut self.drained_since),
                    });
                }
            }
        }
        // Remaining work runs to completion, lowest runnable thread first.
        while !self.all_done() {
            if self.crash_due() {
                self.crash();
                return Ok(());
            }
            let Some(t) = (0..self.threads.len()).find(|&t| self.runnable(t)) else {
                return Err(Error::Deadlock(self.tick));
            };
            self.step(t)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Trace {
        self.trace.abort_stats = self.htm.stats();
        self.trace.max_vdb_depth = self.ctrl.max_vdb_depth();
        self.trace.max_dwq_depth = self.ctrl.max_dwq_depth();
        self.trace.final_vdb_len = self.ctrl.vdb().len();
        self.trace.final_dwq_len = self.ctrl.dwq().len();
        self.trace.thread_clocks = self.threads.iter().map(|t| t.clock).collect();
        self.trace.final_image = self.ctrl.pm().clone();
        self.trace.final_memory = (0..self.cfg.home_lines)
            .map(|i| {
                let a = self.map.home(i);
                match self.cache.get(a) {
                    Some(l) => l.value,
                    None => self.ctrl.memory_read(a).0,
                }
            })
            .collect();
        if self.method() == Method::PtlEager {
            self.trace.abort_stats.commits = self.trace.committed_count() as u64;
        }
        self.trace
    }

    pub(crate) fn strict_mode(&self) -> StrictMode {
        self.cfg.strict_mode
    }

    /// Absolute address of a log-area offset.
    pub(crate) fn log_addr(&self, offset: u64) -> Address {
        self.map.log(offset)
    }
}
