//! Restricted-transactional-memory emulation: per-thread speculative
//! sections with eager conflict detection and a global fallback lock.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{Address, LineValue};

/// Who survives when an access hits another thread's section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ConflictPolicy {
    /// The incoming access aborts the section that holds the line.
    #[default]
    RequesterWins,
    /// The requesting section aborts itself. Non-transactional requesters
    /// still abort the holder (strong isolation).
    HolderWins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SectionStatus {
    Active,
    Committed,
    Aborted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbortReason {
    Conflict,
    Capacity,
    /// Fallback lock observed held at begin.
    LockHeld,
    /// Another thread took the fallback lock.
    LockAcquired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HtmSection {
    pub owner: usize,
    pub read_set: BTreeSet<Address>,
    pub write_set: BTreeSet<Address>,
    /// Speculative values, invisible to other threads until commit.
    pub buffer: BTreeMap<Address, LineValue>,
    pub status: SectionStatus,
    pub retry_count: u32,
}

impl HtmSection {
    fn new(owner: usize, retry_count: u32) -> Self {
        Self {
            owner,
            read_set: BTreeSet::new(),
            write_set: BTreeSet::new(),
            buffer: BTreeMap::new(),
            status: SectionStatus::Active,
            retry_count,
        }
    }

    fn conflicts_with(&self, addr: Address, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.write_set.contains(&addr),
            AccessKind::Write => self.write_set.contains(&addr) || self.read_set.contains(&addr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FallbackLock {
    #[default]
    Free,
    Held(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortStats {
    pub conflict: u64,
    pub capacity: u64,
    pub lock_held: u64,
    pub lock_acquired: u64,
    pub fallback_runs: u64,
    pub commits: u64,
}

impl AbortStats {
    pub fn total(&self) -> u64 {
        self.conflict + self.capacity + self.lock_held + self.lock_acquired
    }

    fn count(&mut self, r: AbortReason) {
        match r {
            AbortReason::Conflict => self.conflict += 1,
            AbortReason::Capacity => self.capacity += 1,
            AbortReason::LockHeld => self.lock_held += 1,
            AbortReason::LockAcquired => self.lock_acquired += 1,
        }
    }
}

/// Outcome of routing one memory access through conflict detection.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessVerdict {
    /// Sections (by owner thread) aborted by this access, excluding the requester.
    pub aborted: Vec<HtmSection>,
    /// The requester's own section lost and was aborted.
    pub requester_aborted: Option<HtmSection>,
}

#[derive(Debug, Clone)]
pub struct HtmUnit {
    sections: Vec<Option<HtmSection>>,
    lock: FallbackLock,
    policy: ConflictPolicy,
    stats: AbortStats,
}

impl HtmUnit {
    pub fn new(threads: usize, policy: ConflictPolicy) -> Self {
        Self {
            sections: vec![None; threads],
            lock: FallbackLock::Free,
            policy,
            stats: AbortStats::default(),
        }
    }

    pub fn stats(&self) -> AbortStats {
        self.stats
    }

    pub fn lock(&self) -> FallbackLock {
        self.lock
    }

    pub fn section(&self, thread: usize) -> Option<&HtmSection> {
        self.sections[thread].as_ref()
    }

    pub fn in_section(&self, thread: usize) -> bool {
        self.sections[thread].is_some()
    }

    pub fn active_count(&self) -> usize {
        self.sections.iter().filter(|s| s.is_some()).count()
    }

    /// Starts a section. The lock is part of every section's read set, so a
    /// held lock aborts the attempt immediately.
    pub fn xbegin(&mut self, thread: usize, retry_count: u32) -> Result<(), AbortReason> {
        assert!(self.sections[thread].is_none(), "nested xbegin on thread {thread}");
        if matches!(self.lock, FallbackLock::Held(_)) {
            self.stats.count(AbortReason::LockHeld);
            return Err(AbortReason::LockHeld);
        }
        self.sections[thread] = Some(HtmSection::new(thread, retry_count));
        Ok(())
    }

    /// Speculative value written by the thread's own section, if any.
    pub fn own_value(&self, thread: usize, addr: Address) -> Option<LineValue> {
        self.sections[thread].as_ref()?.buffer.get(&addr).copied()
    }

    /// Eager conflict detection for an access by `requester` (which may or
    /// may not be inside a section). On success the access is recorded in
    /// the requester's read or write set.
    pub fn access(&mut self, requester: usize, addr: Address, kind: AccessKind) -> AccessVerdict {
        let mut verdict = AccessVerdict::default();
        let transactional = self.sections[requester].is_some();
        let holders: Vec<usize> = self
            .sections
            .iter()
            .enumerate()
            .filter(|(i, s)| *i != requester && s.as_ref().is_some_and(|s| s.conflicts_with(addr, kind)))
            .map(|(i, _)| i)
            .collect();

        if !holders.is_empty() && transactional && self.policy == ConflictPolicy::HolderWins {
            verdict.requester_aborted = self.abort(requester, AbortReason::Conflict);
            return verdict;
        }
        for h in holders {
            if let Some(s) = self.abort(h, AbortReason::Conflict) {
                verdict.aborted.push(s);
            }
        }
        if let Some(s) = self.sections[requester].as_mut() {
            match kind {
                AccessKind::Read => {
                    s.read_set.insert(addr);
                }
                AccessKind::Write => {
                    s.write_set.insert(addr);
                }
            }
        }
        verdict
    }

    pub fn buffer_write(&mut self, thread: usize, addr: Address, value: LineValue) {
        let s = self.sections[thread].as_mut().expect("buffered write outside section");
        s.buffer.insert(addr, value);
    }

    pub fn abort(&mut self, thread: usize, reason: AbortReason) -> Option<HtmSection> {
        let mut s = self.sections[thread].take()?;
        s.status = SectionStatus::Aborted;
        self.stats.count(reason);
        Some(s)
    }

    /// Commits the section; the caller publishes its buffer atomically.
    pub fn xend(&mut self, thread: usize) -> HtmSection {
        let mut s = self.sections[thread].take().expect("xend outside section");
        s.status = SectionStatus::Committed;
        self.stats.commits += 1;
        s
    }

    /// Takes the fallback lock, aborting every active section. Fails if held.
    pub fn acquire_lock(&mut self, thread: usize) -> Option<Vec<HtmSection>> {
        if self.lock != FallbackLock::Free {
            return None;
        }
        self.lock = FallbackLock::Held(thread);
        self.stats.fallback_runs += 1;
        let victims: Vec<usize> = (0..self.sections.len())
            .filter(|&i| i != thread && self.sections[i].is_some())
            .collect();
        Some(
            victims
                .into_iter()
                .filter_map(|i| self.abort(i, AbortReason::LockAcquired))
                .collect(),
        )
    }

    pub fn release_lock(&mut self, thread: usize) {
        assert_eq!(self.lock, FallbackLock::Held(thread), "release by non-holder");
        self.lock = FallbackLock::Free;
        self.stats.commits += 1;
    }

    pub fn count_capacity_abort(&mut self, thread: usize) -> Option<HtmSection> {
        self.abort(thread, AbortReason::Capacity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const W: Address = Address(0);
    const X: Address = Address(1);

    #[test]
    fn disjoint_sections_do_not_abort() {
        let mut h = HtmUnit::new(2, ConflictPolicy::RequesterWins);
        h.xbegin(0, 0).unwrap();
        h.xbegin(1, 0).unwrap();
        assert_eq!(h.access(0, W, AccessKind::Write), AccessVerdict::default());
        assert_eq!(h.access(1, X, AccessKind::Write), AccessVerdict::default());
        h.xend(0);
        h.xend(1);
        assert_eq!(h.stats().total(), 0);
        assert_eq!(h.stats().commits, 2);
    }

    #[test]
    fn requester_wins_aborts_holder() {
        let mut h = HtmUnit::new(2, ConflictPolicy::RequesterWins);
        h.xbegin(0, 0).unwrap();
        h.xbegin(1, 0).unwrap();
        h.access(1, W, AccessKind::Write);
        let v = h.access(0, W, AccessKind::Read);
        assert_eq!(v.aborted.len(), 1);
        assert_eq!(v.aborted[0].owner, 1);
        assert!(v.requester_aborted.is_none());
        assert!(h.in_section(0) && !h.in_section(1));
    }

    #[test]
    fn holder_wins_aborts_requester() {
        let mut h = HtmUnit::new(2, ConflictPolicy::HolderWins);
        h.xbegin(0, 0).unwrap();
        h.xbegin(1, 0).unwrap();
        h.access(1, W, AccessKind::Read);
        let v = h.access(0, W, AccessKind::Write);
        assert!(v.aborted.is_empty());
        assert_eq!(v.requester_aborted.unwrap().owner, 0);
        assert!(h.in_section(1));
    }

    #[test]
    fn read_read_is_not_a_conflict() {
        let mut h = HtmUnit::new(2, ConflictPolicy::RequesterWins);
        h.xbegin(0, 0).unwrap();
        h.xbegin(1, 0).unwrap();
        h.access(0, W, AccessKind::Read);
        assert_eq!(h.access(1, W, AccessKind::Read), AccessVerdict::default());
    }

    #[test]
    fn non_transactional_access_always_wins() {
        let mut h = HtmUnit::new(2, ConflictPolicy::HolderWins);
        h.xbegin(1, 0).unwrap();
        h.access(1, X, AccessKind::Read);
        let v = h.access(0, X, AccessKind::Write);
        assert_eq!(v.aborted.len(), 1);
    }

    #[test]
    fn fallback_lock_excludes_sections() {
        let mut h = HtmUnit::new(3, ConflictPolicy::RequesterWins);
        h.xbegin(1, 0).unwrap();
        let victims = h.acquire_lock(0).unwrap();
        assert_eq!(victims.len(), 1);
        assert_eq!(h.stats().lock_acquired, 1);
        assert_eq!(h.xbegin(2, 0), Err(AbortReason::LockHeld));
        assert!(h.acquire_lock(2).is_none());
        h.release_lock(0);
        assert!(h.xbegin(2, 0).is_ok());
    }

    #[test]
    fn speculative_values_are_private() {
        let mut h = HtmUnit::new(2, ConflictPolicy::RequesterWins);
        h.xbegin(0, 0).unwrap();
        h.access(0, W, AccessKind::Write);
        h.buffer_write(0, W, 1);
        assert_eq!(h.own_value(0, W), Some(1));
        assert_eq!(h.own_value(1, W), None);
        let s = h.abort(0, AbortReason::Conflict).unwrap();
        assert_eq!(s.status, SectionStatus::Aborted);
        assert_eq!(h.own_value(0, W), None);
    }
}
