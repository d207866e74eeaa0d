//! Persistent memory controller: current-open-transaction tracking, the
//! volatile delay buffer (VDB) and the durability wait queue (DWQ).
//!
//! Every cache line evicted toward the home region while any wrap is open
//! is parked in the VDB, tagged with the open set at that instant. The tag
//! only shrinks as wraps close, so tags empty out in FIFO order and draining
//! only ever inspects the head.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::domain::{Address, AddressMap, DependencySet, LineValue, TxnId, WrapId};
use crate::error::{Error, Result};
use crate::memory::PmImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ControllerMode {
    #[default]
    Delayed,
    /// Mutation: evictions bypass the delay buffer entirely.
    DrainImmediately,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VdbEntry {
    pub addr: Address,
    pub data: LineValue,
    pub ds: DependencySet,
    /// Simulation-only provenance tag; never consulted by the controller.
    pub provenance: Option<TxnId>,
}

/// FIFO of parked lines plus an index from address to its newest entry.
#[derive(Debug, Clone, Default)]
pub struct Vdb {
    fifo: VecDeque<(u64, VdbEntry)>,
    index: HashMap<Address, u64>,
    next_seq: u64,
}

impl Vdb {
    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &VdbEntry> {
        self.fifo.iter().map(|(_, e)| e)
    }

    fn push(&mut self, entry: VdbEntry) {
        debug_assert!(
            self.fifo
                .back()
                .is_none_or(|(_, tail)| tail.ds.is_subset(&entry.ds)),
            "VDB insertion breaks tag-subset order"
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.index.insert(entry.addr, seq);
        self.fifo.push_back((seq, entry));
    }

    /// Newest buffered copy of `addr`.
    pub fn latest(&self, addr: Address) -> Option<&VdbEntry> {
        let seq = *self.index.get(&addr)?;
        let head = self.fifo.front()?.0;
        self.fifo.get((seq - head) as usize).map(|(_, e)| e)
    }

    fn remove_wrap(&mut self, w: WrapId) {
        for (_, e) in self.fifo.iter_mut() {
            e.ds.remove(w);
        }
    }

    fn pop_ready(&mut self) -> Option<VdbEntry> {
        if !self.fifo.front()?.1.ds.is_empty() {
            return None;
        }
        let (seq, entry) = self.fifo.pop_front()?;
        if self.index.get(&entry.addr) == Some(&seq) {
            self.index.remove(&entry.addr);
        }
        Some(entry)
    }

    /// True when every entry's tag is a subset of each later entry's tag.
    pub fn is_ordered(&self) -> bool {
        self.fifo
            .iter()
            .zip(self.fifo.iter().skip(1))
            .all(|((_, a), (_, b))| a.ds.is_subset(&b.ds))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwqEntry {
    pub ds: DependencySet,
    /// Mailbox to signal; one per thread.
    pub token: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Dwq {
    fifo: VecDeque<DwqEntry>,
}

impl Dwq {
    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DwqEntry> {
        self.fifo.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteOutcome {
    /// Reached persistent memory.
    Persisted,
    /// Parked in the delay buffer.
    Buffered,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CloseOutcome {
    /// Entries written back to persistent memory, in FIFO order.
    pub drained: Vec<VdbEntry>,
    /// Mailbox tokens signaled durable, in FIFO order.
    pub signaled: Vec<usize>,
}

/// Serializable snapshot of the controller's volatile state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControllerDump {
    pub cot: Vec<u8>,
    pub vdb: Vec<VdbDumpEntry>,
    pub dwq: Vec<DwqDumpEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VdbDumpEntry {
    pub addr: u64,
    pub data: LineValue,
    pub ds: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwqDumpEntry {
    pub ds: Vec<u8>,
    pub token: usize,
}

#[derive(Debug, Clone)]
pub struct PmController {
    cot: DependencySet,
    vdb: Vdb,
    dwq: Dwq,
    pm: PmImage,
    map: AddressMap,
    mode: ControllerMode,
    max_vdb_depth: usize,
    max_dwq_depth: usize,
}

impl PmController {
    pub fn new(pm: PmImage, mode: ControllerMode) -> Self {
        let map = pm.address_map();
        Self {
            cot: DependencySet::EMPTY,
            vdb: Vdb::default(),
            dwq: Dwq::default(),
            pm,
            map,
            mode,
            max_vdb_depth: 0,
            max_dwq_depth: 0,
        }
    }

    pub fn cot(&self) -> DependencySet {
        self.cot
    }

    pub fn vdb(&self) -> &Vdb {
        &self.vdb
    }

    pub fn dwq(&self) -> &Dwq {
        &self.dwq
    }

    pub fn pm(&self) -> &PmImage {
        &self.pm
    }

    pub fn into_pm(self) -> PmImage {
        self.pm
    }

    pub fn max_vdb_depth(&self) -> usize {
        self.max_vdb_depth
    }

    pub fn max_dwq_depth(&self) -> usize {
        self.max_dwq_depth
    }

    pub fn open_wrap(&mut self, w: WrapId) -> Result<()> {
        if self.cot.contains(w) {
            return Err(Error::DuplicateOpen(w));
        }
        self.cot.insert(w);
        Ok(())
    }

    /// Eviction or streaming store arriving from the cache side.
    ///
    /// Returns where the line went plus any head entries drained by the
    /// opportunistic head check.
    pub fn memory_write(
        &mut self,
        addr: Address,
        data: LineValue,
        provenance: Option<TxnId>,
    ) -> (WriteOutcome, Vec<VdbEntry>) {
        let pass_through = self.map.is_log(addr)
            || self.cot.is_empty()
            || self.mode == ControllerMode::DrainImmediately;
        if pass_through {
            self.pm.write(addr, data);
            return (WriteOutcome::Persisted, Vec::new());
        }
        self.vdb.push(VdbEntry {
            addr,
            data,
            ds: self.cot,
            provenance,
        });
        self.max_vdb_depth = self.max_vdb_depth.max(self.vdb.len());
        (WriteOutcome::Buffered, self.drain_vdb())
    }

    /// Newest value of `addr` as seen through the controller.
    pub fn memory_read(&self, addr: Address) -> (LineValue, Option<TxnId>) {
        match self.vdb.latest(addr) {
            Some(e) => (e.data, e.provenance),
            None => (self.pm.read(addr), None),
        }
    }

    pub fn close_wrap(&mut self, w: WrapId, token: Option<usize>) -> Result<CloseOutcome> {
        if !self.cot.contains(w) {
            return Err(Error::NotOpen(w));
        }
        self.cot.remove(w);
        if let Some(token) = token {
            self.dwq.fifo.push_back(DwqEntry {
                ds: self.cot,
                token,
            });
            self.max_dwq_depth = self.max_dwq_depth.max(self.dwq.len());
        }
        self.vdb.remove_wrap(w);
        let drained = self.drain_vdb();
        for e in self.dwq.fifo.iter_mut() {
            e.ds.remove(w);
        }
        let mut signaled = Vec::new();
        while self.dwq.fifo.front().is_some_and(|e| e.ds.is_empty()) {
            signaled.push(self.dwq.fifo.pop_front().unwrap().token);
        }
        Ok(CloseOutcome { drained, signaled })
    }

    fn drain_vdb(&mut self) -> Vec<VdbEntry> {
        let mut out = Vec::new();
        while let Some(e) = self.vdb.pop_ready() {
            self.pm.write(e.addr, e.data);
            out.push(e);
        }
        out
    }

    pub fn dump(&self, width: usize) -> ControllerDump {
        ControllerDump {
            cot: self.cot.to_bits(width),
            vdb: self
                .vdb
                .iter()
                .map(|e| VdbDumpEntry {
                    addr: e.addr.0,
                    data: e.data,
                    ds: e.ds.to_bits(width),
                })
                .collect(),
            dwq: self
                .dwq
                .iter()
                .map(|e| DwqDumpEntry {
                    ds: e.ds.to_bits(width),
                    token: e.token,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log_layout::LogGeometry;

    const X: Address = Address(0);
    const Y: Address = Address(1);
    const Z: Address = Address(2);

    fn w(i: usize) -> WrapId {
        WrapId::new(i).unwrap()
    }

    fn ctrl() -> PmController {
        PmController::new(PmImage::new(4, LogGeometry::new(4, 1, 2)), ControllerMode::Delayed)
    }

    fn bits(c: &PmController) -> Vec<u8> {
        c.cot().to_bits(4)
    }

    #[test]
    fn open_sets_bits_and_rejects_duplicates() {
        let mut c = ctrl();
        c.open_wrap(w(0)).unwrap();
        assert_eq!(bits(&c), vec![1, 0, 0, 0]);
        for i in 1..4 {
            c.open_wrap(w(i)).unwrap();
        }
        assert_eq!(bits(&c), vec![1, 1, 1, 1]);
        assert_eq!(c.open_wrap(w(0)), Err(Error::DuplicateOpen(w(0))));
        assert_eq!(c.close_wrap(w(5), None), Err(Error::NotOpen(w(5))));
    }

    #[test]
    fn empty_cot_and_log_writes_pass_through() {
        let mut c = ctrl();
        assert_eq!(c.memory_write(X, 3, None).0, WriteOutcome::Persisted);
        assert_eq!(c.pm().read(X), 3);
        c.open_wrap(w(0)).unwrap();
        let log = c.pm().address_map().log(0);
        assert_eq!(c.memory_write(log, 9, None).0, WriteOutcome::Persisted);
        assert_eq!(c.pm().read(log), 9);
        assert!(c.vdb().is_empty());
        assert_eq!(c.memory_write(X, 4, None).0, WriteOutcome::Buffered);
        assert_eq!(c.pm().read(X), 3);
    }

    #[test]
    fn read_prefers_newest_buffered_copy() {
        let mut c = ctrl();
        c.open_wrap(w(0)).unwrap();
        c.memory_write(X, 1, None);
        c.open_wrap(w(1)).unwrap();
        c.memory_write(X, 2, None);
        assert_eq!(c.vdb().len(), 2);
        assert_eq!(c.memory_read(X).0, 2);
        assert_eq!(c.memory_read(Y).0, 0);

        // Draining the older copy keeps the index on the newer one.
        let out = c.close_wrap(w(0), None).unwrap();
        assert_eq!(out.drained.len(), 1);
        assert_eq!(c.pm().read(X), 1);
        assert_eq!(c.memory_read(X).0, 2);
        let out = c.close_wrap(w(1), None).unwrap();
        assert_eq!(out.drained.len(), 1);
        assert_eq!(c.memory_read(X).0, 2);
        assert_eq!(c.pm().read(X), 2);
    }

    #[test]
    fn worked_example_sequence() {
        let mut c = ctrl();
        for i in 0..3 {
            c.open_wrap(w(i)).unwrap();
        }
        c.memory_write(X, 10, None);
        c.open_wrap(w(3)).unwrap();
        c.memory_write(Y, 20, None);
        c.close_wrap(w(2), None).unwrap();
        let ds: Vec<_> = c.vdb().iter().map(|e| e.ds.to_bits(4)).collect();
        assert_eq!(ds, vec![vec![1, 1, 0, 0], vec![1, 1, 0, 1]]);
        c.close_wrap(w(1), Some(1)).unwrap();
        assert_eq!(c.dwq().iter().next().unwrap().ds.to_bits(4), vec![1, 0, 0, 1]);
        c.memory_write(Z, 30, None);
        c.memory_write(X, 11, None);
        assert!(c.vdb().is_ordered());
        let out = c.close_wrap(w(0), None).unwrap();
        assert_eq!(out.drained.iter().map(|e| e.addr).collect::<Vec<_>>(), vec![X]);
        assert!(out.signaled.is_empty());
        let out = c.close_wrap(w(3), None).unwrap();
        assert_eq!(
            out.drained.iter().map(|e| e.addr).collect::<Vec<_>>(),
            vec![Y, Z, X]
        );
        assert_eq!(out.signaled, vec![1]);
        assert!(c.vdb().is_empty() && c.dwq().is_empty());
        assert_eq!((c.pm().read(X), c.pm().read(Y), c.pm().read(Z)), (11, 20, 30));
        assert_eq!(c.max_vdb_depth(), 4);
    }

    #[test]
    fn strict_close_with_no_other_open_signals_at_once() {
        let mut c = ctrl();
        c.open_wrap(w(2)).unwrap();
        let out = c.close_wrap(w(2), Some(7)).unwrap();
        assert_eq!(out.signaled, vec![7]);
    }

    #[test]
    fn drain_immediately_mutation_skips_buffer() {
        let mut c = PmController::new(
            PmImage::new(4, LogGeometry::new(1, 1, 1)),
            ControllerMode::DrainImmediately,
        );
        c.open_wrap(w(0)).unwrap();
        assert_eq!(c.memory_write(X, 5, None).0, WriteOutcome::Persisted);
        assert_eq!(c.pm().read(X), 5);
    }
}
