//! PTL-Eager baseline: two-phase locking with encounter-time write locks,
//! versioned reads, and an undo log persisted before every in-place write.
//!
//! Each thread owns slot 0 of its log-area rows as an undo area:
//!
//! ```text
//! line 0        active transaction sequence number (0 = none)
//! line 2 + 2i   entry i tag: seq << 32 | home address
//! line 3 + 2i   entry i: value before the write
//! ```
//!
//! Commit flushes the written lines, then clears the sequence line; that
//! store is the commit point. Recovery undoes the entries tagged with a
//! still-active sequence number, newest first.

use serde::{Deserialize, Serialize};

use crate::domain::{Address, LineValue, WrapId};
use crate::engine::machine::{Access, Machine, NextAccess, Phase, PtlLock, PtlTx};
use crate::engine::StepOp;
use crate::error::{Error, Result};
use crate::memory::PmImage;

/// Transactions rolled back by [`ptl_recover`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PtlRecovery {
    /// `(thread, sequence number, entries undone)`.
    pub undone: Vec<(usize, u32, usize)>,
    pub image: PmImage,
}

/// Applies the undo entries of every transaction still active in `image`.
pub fn ptl_recover(image: &PmImage) -> Result<PtlRecovery> {
    let geom = *image.geometry();
    let map = image.address_map();
    let mut out = image.clone();
    let mut undone = Vec::new();
    for t in 0..geom.wraps as usize {
        let w = WrapId::new(t)?;
        let header = map.log(geom.header_offset(w, 0));
        let seq = image.read(header);
        if seq == 0 {
            continue;
        }
        let mut entries = Vec::new();
        for i in 0..geom.ws_capacity {
            let (ta, va) = geom.entry_offsets(w, 0, i);
            let tag = image.read(map.log(ta));
            if tag >> 32 == seq {
                let addr = Address(tag & 0xffff_ffff);
                if !map.is_home(addr) {
                    return Err(Error::CorruptLog {
                        wrap: w,
                        slot: 0,
                        reason: format!("undo entry names non-home address {addr}"),
                    });
                }
                entries.push((addr, image.read(map.log(va))));
            }
        }
        for &(a, old) in entries.iter().rev() {
            out.write(a, old);
        }
        out.write(header, 0);
        undone.push((t, seq as u32, entries.len()));
    }
    Ok(PtlRecovery { undone, image: out })
}

impl Machine {
    fn undo_line(&self, t: usize, offset: u64) -> Address {
        debug_assert!(offset < self.geom.record_lines());
        let w = WrapId::new(t).expect("thread count checked");
        self.log_addr(self.geom.slot_base(w, 0) + offset)
    }

    fn lock_of(&self, a: Address) -> PtlLock {
        self.locks.get(&a).copied().unwrap_or_default()
    }

    /// Every value read so far is still current.
    fn reads_valid(&self, t: usize) -> bool {
        self.tx(t).ptl.read_versions.iter().all(|(a, ver)| {
            let l = self.lock_of(*a);
            l.owner == Some(t) || (l.owner.is_none() && l.version == *ver)
        })
    }

    pub(crate) fn ptl_step(&mut self, t: usize, phase: Phase) -> Result<StepOp> {
        match phase {
            Phase::PtlBegin => {
                self.ptl_seq += 1;
                let seq = self.ptl_seq;
                self.charge(t, self.cfg.latency.cache_access);
                let tx = self.tx_mut(t);
                tx.ptl = PtlTx {
                    seq,
                    ..Default::default()
                };
                tx.replay.clear();
                tx.pending_store = None;
                self.threads[t].phase = Phase::PtlBody;
                Ok(StepOp::Begin)
            }
            Phase::PtlBody => self.ptl_body_step(t),
            Phase::PtlCommit => Ok(self.ptl_commit_step(t)),
            Phase::PtlClear => {
                let header = self.undo_line(t, 0);
                let txn = self.tx(t).txn;
                self.store_through(t, header, 0, Some(txn));
                self.record_commit(t);
                self.release_locks(t);
                self.finish_tx(t);
                Ok(StepOp::Commit { persist: None })
            }
            Phase::PtlAbortClear => {
                let header = self.undo_line(t, 0);
                self.store_through(t, header, 0, None);
                self.release_locks(t);
                self.ptl_retry(t);
                Ok(StepOp::Abort)
            }
            other => Err(Error::ProtocolViolation(format!(
                "thread {t}: unexpected phase {other:?}"
            ))),
        }
    }

    fn ptl_body_step(&mut self, t: usize) -> Result<StepOp> {
        let txn = self.tx(t).txn;
        if let Some((addr, value)) = self.tx(t).pending_store {
            self.store(t, addr, value, Some(txn));
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
            NextAccess::Finished => {
                self.threads[t].phase = Phase::PtlCommit;
                return Ok(self.ptl_commit_step(t));
            }
            NextAccess::Access(a) => a,
        };
        let addr = access.addr;
        let lock = self.lock_of(addr);
        if lock.owner.is_some_and(|o| o != t) {
            return Ok(self.ptl_abort(t));
        }
        if !access.write {
            let value = self.load(t, addr);
            if lock.owner != Some(t) {
                self.tx_mut(t).ptl.read_versions.entry(addr).or_insert(lock.version);
            }
            if !self.reads_valid(t) {
                return Ok(self.ptl_abort(t));
            }
            self.tx_mut(t).replay.push(Access { value, ..access });
            return Ok(StepOp::Read { addr, value });
        }
        if lock.owner != Some(t) {
            if self
                .tx(t)
                .ptl
                .read_versions
                .get(&addr)
                .is_some_and(|v| *v != lock.version)
            {
                return Ok(self.ptl_abort(t));
            }
            self.locks.entry(addr).or_default().owner = Some(t);
            self.tx_mut(t).ptl.locks.push(addr);
        }
        if self.tx(t).ptl.undo.iter().any(|(a, _)| *a == addr) {
            self.store(t, addr, access.value, Some(txn));
            self.tx_mut(t).replay.push(access);
            return Ok(StepOp::Write {
                addr,
                value: access.value,
            });
        }
        // First write to this line: persist its old value before touching it.
        let index = self.tx(t).ptl.undo.len() as u32;
        if index >= self.geom.ws_capacity {
            return Err(Error::LogOverflow {
                entries: index as usize + 1,
                capacity: self.geom.ws_capacity as usize,
            });
        }
        let old = self.load(t, addr);
        let seq = self.tx(t).ptl.seq as u64;
        if !self.tx(t).ptl.header_written {
            let header = self.undo_line(t, 0);
            self.store_through(t, header, seq, Some(txn));
            self.tx_mut(t).ptl.header_written = true;
        }
        let tag_line = self.undo_line(t, 2 + 2 * index as u64);
        let val_line = self.undo_line(t, 3 + 2 * index as u64);
        self.store(t, tag_line, (seq << 32) | addr.0, Some(txn));
        self.store(t, val_line, old, Some(txn));
        for a in [tag_line, val_line] {
            if let Some(l) = self.cache.clean(a) {
                self.deliver(a, l.value, l.provenance, crate::engine::PmWriteKind::Flush);
            }
        }
        let lat = self.cfg.latency;
        self.charge(t, lat.pm_write() + lat.line_transfer + lat.fence);
        self.trace.ptl_pm_writes.0 += 1;
        let tx = self.tx_mut(t);
        tx.ptl.undo.push((addr, old));
        tx.pending_store = Some((addr, access.value));
        Ok(StepOp::UndoLog { addr })
    }

    fn ptl_commit_step(&mut self, t: usize) -> StepOp {
        if !self.reads_valid(t) {
            return self.ptl_abort(t);
        }
        let written: Vec<Address> = self.tx(t).ptl.undo.iter().map(|(a, _)| *a).collect();
        if written.is_empty() {
            self.record_commit(t);
            self.release_locks(t);
            self.finish_tx(t);
            return StepOp::Commit { persist: None };
        }
        self.trace.ptl_pm_writes.1 += written.len() as u64;
        for a in written {
            self.stage(t, a);
        }
        self.threads[t].phase = Phase::Fence(Box::new(Phase::PtlClear));
        StepOp::Commit { persist: None }
    }

    /// Restores the old values in place, makes them durable, then retires
    /// the undo log and retries.
    fn ptl_abort(&mut self, t: usize) -> StepOp {
        let txn = self.tx(t).txn;
        self.record_mut(txn).aborts += 1;
        let undo: Vec<(Address, LineValue)> = self.tx(t).ptl.undo.clone();
        for &(a, old) in undo.iter().rev() {
            self.store(t, a, old, None);
        }
        if self.tx(t).ptl.header_written {
            for &(a, _) in &undo {
                self.stage(t, a);
            }
            self.threads[t].phase = Phase::Fence(Box::new(Phase::PtlAbortClear));
        } else {
            self.release_locks(t);
            self.ptl_retry(t);
        }
        StepOp::Abort
    }

    fn ptl_retry(&mut self, t: usize) {
        let tx = self.tx_mut(t);
        tx.retry += 1;
        tx.replay.clear();
        tx.pending_store = None;
        let retry = tx.retry;
        self.start_backoff(t, retry);
    }

    fn release_locks(&mut self, t: usize) {
        let locks = std::mem::take(&mut self.tx_mut(t).ptl.locks);
        for a in locks {
            let l = self.locks.entry(a).or_default();
            l.owner = None;
            l.version += 1;
        }
        self.tx_mut(t).ptl.read_versions.clear();
    }
}
