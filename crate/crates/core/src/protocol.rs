//! The WrAP transaction library and bare-HTM execution as simulator steps.
//!
//! A WrAP transaction moves through
//!
//! ```text
//! Open -> Fence -> Begin -> Body* -> commit -> Fence -> WriteEnd -> Fence -> Close [-> wait]
//! ```
//!
//! Open registers the wrap with the controller, takes the start timestamp
//! and persists the log header. Inside the HTM section every store is
//! preceded by a speculative append to the in-cache log; the persist
//! timestamp is the last speculative store before `xend`. After commit the
//! log lines are flushed, the end marker is written and flushed, and only
//! then is the controller told the wrap closed. Strict transactions then
//! wait for the controller's durability signal (or scan the other threads'
//! status lines in software mode).

use std::collections::VecDeque;

use crate::domain::{Address, TxnId, WrapId};
use crate::engine::machine::{Access, Machine, NextAccess, Phase};
use crate::engine::{Method, StepOp, StrictMode};
use crate::error::{Error, Result};
use crate::log_layout::{encode_end_marker, record_checksum};

impl Machine {
    pub(crate) fn protocol_step(&mut self, t: usize, phase: Phase) -> Result<StepOp> {
        match phase {
            Phase::Open => self.open_step(t),
            Phase::Begin => Ok(self.begin_step(t)),
            Phase::Body => self.body_step(t),
            Phase::WriteEnd => Ok(self.write_end_step(t)),
            Phase::Close => self.close_step(t),
            Phase::StrictWait => {
                self.threads[t].mailbox = false;
                self.finish_tx(t);
                Ok(StepOp::Durable)
            }
            Phase::SoftStrictWait => {
                let txn = self.tx(t).txn;
                let tick = self.tick;
                self.record_mut(txn).signal_tick = Some(tick);
                self.finish_tx(t);
                Ok(StepOp::Durable)
            }
            Phase::AcquireLock => Ok(self.acquire_lock_step(t)),
            Phase::CleanupRequest => Ok(self.cleanup_request_step(t)),
            Phase::CleanupWait => Ok(self.cleanup_flush_step(t)),
            Phase::CleanupClear(queue) => Ok(self.cleanup_clear_step(t, queue)),
            other => Err(Error::ProtocolViolation(format!(
                "thread {t}: unexpected phase {other:?}"
            ))),
        }
    }

    fn wrap_of(&self, t: usize) -> WrapId {
        self.tx(t).wrap.expect("WrAP transaction without wrap id")
    }

    fn slot_line(&self, t: usize, offset: impl Fn(&crate::log_layout::LogGeometry, WrapId, u32) -> u64) -> Address {
        let tx = self.tx(t);
        let w = tx.wrap.expect("WrAP transaction without wrap id");
        self.log_addr(offset(&self.geom, w, tx.slot))
    }

    fn open_step(&mut self, t: usize) -> Result<StepOp> {
        if self.threads[t].slots_used >= self.geom.slots_per_wrap {
            self.threads[t].cleanup_resume = true;
            self.threads[t].phase = Phase::CleanupRequest;
            return Ok(StepOp::Cleanup);
        }
        let w = self.wrap_of(t);
        self.ctrl.open_wrap(w)?;
        self.charge(t, self.cfg.latency.controller_notify);
        let start = self.now();
        let th = &mut self.threads[t];
        let slot = th.next_slot;
        th.next_slot = (slot + 1) % self.geom.slots_per_wrap;
        th.slots_used += 1;
        th.open_start = Some(start);
        let tx = self.tx_mut(t);
        tx.slot = slot;
        tx.start = Some(start);
        let txn = tx.txn;
        let tick = self.tick;
        let rec = self.record_mut(txn);
        rec.slot = Some(slot);
        rec.start_ts = Some(start);
        rec.open_tick = Some(tick);
        self.used_slots.push((w, slot, txn));

        let header = self.slot_line(t, |g, w, s| g.header_offset(w, s));
        let persist = self.slot_line(t, |g, w, s| g.persist_offset(w, s));
        let end = self.slot_line(t, |g, w, s| g.end_offset(w, s));
        self.store(t, header, start.get(), Some(txn));
        self.store(t, persist, 0, Some(txn));
        self.store(t, end, 0, Some(txn));
        for a in [header, persist, end] {
            self.stage(t, a);
        }
        self.threads[t].phase = Phase::Fence(Box::new(Phase::Begin));
        Ok(StepOp::Open { wrap: w, start })
    }

    fn begin_step(&mut self, t: usize) -> StepOp {
        self.charge(t, self.cfg.latency.htm_begin_end);
        let retry = self.tx(t).retry;
        match self.htm.xbegin(t, retry) {
            Ok(()) => {
                self.threads[t].phase = Phase::Body;
                StepOp::Begin
            }
            Err(_) => {
                let threshold = self.cfg.retry_threshold;
                let tx = self.tx_mut(t);
                tx.retry += 1;
                let retry = tx.retry;
                let txn = tx.txn;
                self.record_mut(txn).aborts += 1;
                if retry > threshold {
                    self.threads[t].phase = Phase::AcquireLock;
                } else {
                    self.start_backoff(t, retry);
                }
                StepOp::Abort
            }
        }
    }

    fn acquire_lock_step(&mut self, t: usize) -> StepOp {
        let Some(victims) = self.htm.acquire_lock(t) else {
            return StepOp::Blocked;
        };
        for s in victims {
            self.reset_aborted(s);
        }
        let tx = self.tx_mut(t);
        tx.fallback = true;
        tx.replay.clear();
        tx.log.clear();
        tx.fbuf.clear();
        tx.pending_store = None;
        self.threads[t].phase = Phase::Body;
        StepOp::AcquireLock
    }

    fn body_step(&mut self, t: usize) -> Result<StepOp> {
        if let Some((addr, value)) = self.tx(t).pending_store {
            if !self.tx_write(t, addr, value) {
                return Ok(StepOp::Abort);
            }
            let tx = self.tx_mut(t);
            tx.pending_store = None;
            tx.replay.push(Access {
                addr,
                write: true,
                value,
            });
            return Ok(StepOp::Write { addr, value });
        }
        let access = match self.peek_next(t)? {
            NextAccess::Finished => return Ok(self.commit_step(t)),
            NextAccess::Access(a) => a,
        };
        if !access.write {
            let Some(value) = self.tx_read(t, access.addr) else {
                return Ok(StepOp::Abort);
            };
            self.tx_mut(t).replay.push(Access { value, ..access });
            return Ok(StepOp::Read {
                addr: access.addr,
                value,
            });
        }
        if !self.method().uses_wrap() {
            if !self.tx_write(t, access.addr, access.value) {
                return Ok(StepOp::Abort);
            }
            self.tx_mut(t).replay.push(access);
            return Ok(StepOp::Write {
                addr: access.addr,
                value: access.value,
            });
        }
        // Log append first; the data store follows as the next step.
        let index = self.tx(t).log.len() as u32;
        if index >= self.geom.ws_capacity {
            return Err(Error::LogOverflow {
                entries: index as usize + 1,
                capacity: self.geom.ws_capacity as usize,
            });
        }
        let (la, lv) = {
            let tx = self.tx(t);
            let (a, v) = self
                .geom
                .entry_offsets(tx.wrap.expect("wrap id"), tx.slot, index);
            (self.log_addr(a), self.log_addr(v))
        };
        if !self.tx_write(t, la, access.addr.0) || !self.tx_write(t, lv, access.value) {
            return Ok(StepOp::Abort);
        }
        let tx = self.tx_mut(t);
        tx.log.push((access.addr, access.value));
        tx.pending_store = Some((access.addr, access.value));
        Ok(StepOp::LogAppend { index })
    }

    /// Ends the section: persist timestamp as the last store, then `xend`
    /// (or publication of the lock holder's buffer).
    fn commit_step(&mut self, t: usize) -> StepOp {
        self.charge(t, self.cfg.latency.htm_begin_end);
        let wrap = self.method().uses_wrap();
        let (txn, fallback) = {
            let tx = self.tx(t);
            (tx.txn, tx.fallback)
        };
        let persist = if wrap {
            let ts = self.now();
            let line = self.slot_line(t, |g, w, s| g.persist_offset(w, s));
            if !self.tx_write(t, line, ts.get()) {
                return StepOp::Abort;
            }
            Some(ts)
        } else {
            None
        };
        if fallback {
            let buf = std::mem::take(&mut self.tx_mut(t).fbuf);
            for (a, v) in buf {
                self.store(t, a, v, Some(txn));
            }
            self.htm.release_lock(t);
        } else {
            let section = self.htm.xend(t);
            for (a, v) in section.buffer {
                self.cache.commit_spec(a, v, Some(txn));
            }
        }
        self.record_mut(txn).persist_ts = persist;
        self.record_commit(t);
        if !wrap {
            self.finish_tx(t);
            return StepOp::Commit { persist };
        }
        if self.cfg.skip_log_fence {
            self.threads[t].phase = Phase::WriteEnd;
        } else {
            let persist_line = self.slot_line(t, |g, w, s| g.persist_offset(w, s));
            self.stage(t, persist_line);
            let n = self.tx(t).log.len() as u32;
            let (w, slot) = (self.wrap_of(t), self.tx(t).slot);
            for i in 0..n {
                let (a, v) = self.geom.entry_offsets(w, slot, i);
                self.stage(t, self.log_addr(a));
                self.stage(t, self.log_addr(v));
            }
            self.threads[t].phase = Phase::Fence(Box::new(Phase::WriteEnd));
        }
        StepOp::Commit { persist }
    }

    fn write_end_step(&mut self, t: usize) -> StepOp {
        let (txn, start, entries) = {
            let tx = self.tx(t);
            (tx.txn, tx.start.expect("opened"), tx.log.clone())
        };
        let persist = self.trace.wraps[txn.0 as usize]
            .persist_ts
            .expect("committed");
        let marker = encode_end_marker(
            entries.len(),
            record_checksum(start.get(), persist.get(), &entries),
        );
        let end = self.slot_line(t, |g, w, s| g.end_offset(w, s));
        self.store(t, end, marker, Some(txn));
        if self.cfg.skip_log_fence {
            self.threads[t].phase = Phase::Close;
        } else {
            self.stage(t, end);
            self.threads[t].phase = Phase::Fence(Box::new(Phase::Close));
        }
        StepOp::WriteEnd
    }

    fn close_step(&mut self, t: usize) -> Result<StepOp> {
        let w = self.wrap_of(t);
        let (txn, strict) = {
            let tx = self.tx(t);
            (tx.txn, tx.strict)
        };
        let mode = self.strict_mode();
        let token = (strict && mode == StrictMode::Controller).then_some(t);
        self.charge(t, self.cfg.latency.controller_notify);
        let out = self.ctrl.close_wrap(w, token)?;
        self.record_drained(out.drained);
        let tick = self.tick;
        for tok in out.signaled {
            self.threads[tok].mailbox = true;
            if let Some(other) = self.threads[tok].tx.as_ref().map(|tx| tx.txn) {
                self.record_mut(other).signal_tick = Some(tick);
            }
        }
        self.threads[t].open_start = None;
        self.threads[t].ms.closed = true;
        self.record_mut(txn).close_tick = Some(tick);
        if strict {
            self.threads[t].phase = match mode {
                StrictMode::Controller => Phase::StrictWait,
                StrictMode::Software => Phase::SoftStrictWait,
            };
        } else {
            self.finish_tx(t);
        }
        Ok(StepOp::Close { wrap: w })
    }

    // ----- quiesce-based log cleanup -----

    fn cleanup_request_step(&mut self, t: usize) -> StepOp {
        let th = &self.threads[t];
        if th.cleanup_resume && th.slots_used < self.geom.slots_per_wrap {
            // Someone else's cleanup already freed the ring.
            self.threads[t].cleanup_resume = false;
            self.threads[t].phase = Phase::Open;
            return StepOp::Cleanup;
        }
        self.quiesce_owner = Some(t);
        self.threads[t].phase = Phase::CleanupWait;
        StepOp::Cleanup
    }

    /// All wraps are closed: write every dirty home line back, then clear
    /// the log slots oldest-persist first.
    fn cleanup_flush_step(&mut self, t: usize) -> StepOp {
        debug_assert!(self.ctrl.cot().is_empty() && self.ctrl.vdb().is_empty());
        for a in self.cache.dirty_lines(&self.map) {
            self.stage(t, a);
        }
        let mut slots: Vec<(WrapId, u32, TxnId)> = self.used_slots.clone();
        slots.sort_by_key(|&(_, _, txn)| self.trace.wraps[txn.0 as usize].persist_ts);
        let queue: VecDeque<(WrapId, u32, bool)> =
            slots.into_iter().map(|(w, s, _)| (w, s, false)).collect();
        self.threads[t].phase = Phase::Fence(Box::new(Phase::CleanupClear(queue)));
        StepOp::Cleanup
    }

    fn cleanup_clear_step(&mut self, t: usize, mut queue: VecDeque<(WrapId, u32, bool)>) -> StepOp {
        if let Some((w, slot, header_cleared)) = queue.pop_front() {
            // A zero start time alone marks the slot unused, so it must be
            // durable before the other lines of the record change.
            let offsets = if header_cleared {
                vec![self.geom.persist_offset(w, slot), self.geom.end_offset(w, slot)]
            } else {
                queue.push_front((w, slot, true));
                vec![self.geom.header_offset(w, slot)]
            };
            for off in offsets {
                let a = self.log_addr(off);
                self.store(t, a, 0, None);
                self.stage(t, a);
            }
            self.threads[t].phase = Phase::Fence(Box::new(Phase::CleanupClear(queue)));
            return StepOp::Cleanup;
        }
        for th in &mut self.threads {
            th.next_slot = 0;
            th.slots_used = 0;
        }
        self.used_slots.clear();
        self.quiesce_owner = None;
        if std::mem::take(&mut self.threads[t].cleanup_resume) {
            self.threads[t].phase = Phase::Open;
        } else {
            self.threads[t].pc += 1;
            self.advance_program(t);
        }
        StepOp::Cleanup
    }
}

impl Method {
    /// Whether transactions of this method run inside HTM sections.
    pub fn uses_htm(self) -> bool {
        !matches!(self, Method::PtlEager)
    }
}
