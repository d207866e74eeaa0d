//! Vocabulary types shared by the simulator: timestamps, wrap identifiers,
//! dependency sets, the address map and the per-wrap log record.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of 64-bit words backing a [`DependencySet`].
pub const DS_WORDS: usize = 1;

/// Upper bound on simultaneously registered wraps (one bit each).
pub const MAX_WRAPS: usize = 64 * DS_WORDS;

/// Payload of one simulated cache line.
pub type LineValue = u64;

/// Logical timestamp. Zero is reserved for "unset" and never issued.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp(u64);

impl Timestamp {
    pub fn new(value: u64) -> Option<Self> {
        (value != 0).then_some(Timestamp(value))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ts{}", self.0)
    }
}

/// Monotone issuer of timestamps; stands in for the platform cycle counter.
#[derive(Debug, Clone, Default)]
pub struct Clock {
    last: u64,
}

impl Clock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&mut self) -> Timestamp {
        self.last += 1;
        Timestamp(self.last)
    }

    pub fn last_issued(&self) -> Option<Timestamp> {
        Timestamp::new(self.last)
    }
}

/// Small integer naming an open transaction slot at the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WrapId(u16);

impl WrapId {
    pub fn new(id: usize) -> Result<Self> {
        if id < MAX_WRAPS {
            Ok(WrapId(id as u16))
        } else {
            Err(Error::Config(format!(
                "wrap id {id} exceeds MAX_WRAPS ({MAX_WRAPS})"
            )))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for WrapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "w{}", self.0)
    }
}

/// Global sequence number of one transaction instance within a run.
///
/// Only the simulator and the checker use it; the controller never sees it.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct TxnId(pub u32);

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tx{}", self.0)
    }
}

/// Bit vector over wrap identifiers.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct DependencySet {
    words: [u64; DS_WORDS],
}

impl DependencySet {
    pub const EMPTY: DependencySet = DependencySet {
        words: [0; DS_WORDS],
    };

    pub fn from_wraps<I: IntoIterator<Item = WrapId>>(wraps: I) -> Self {
        let mut ds = Self::EMPTY;
        for w in wraps {
            ds.insert(w);
        }
        ds
    }

    /// Builds a set from a 0/1 vector, index 0 first (the layout used in dumps).
    pub fn from_bits(bits: &[u8]) -> Self {
        let mut ds = Self::EMPTY;
        for (i, &b) in bits.iter().enumerate().take(MAX_WRAPS) {
            if b != 0 {
                ds.words[i / 64] |= 1 << (i % 64);
            }
        }
        ds
    }

    pub fn insert(&mut self, w: WrapId) {
        let i = w.index();
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn remove(&mut self, w: WrapId) {
        let i = w.index();
        self.words[i / 64] &= !(1 << (i % 64));
    }

    /// Copy of `self` with `w` cleared.
    #[must_use]
    pub fn without(mut self, w: WrapId) -> Self {
        self.remove(w);
        self
    }

    pub fn contains(&self, w: WrapId) -> bool {
        let i = w.index();
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_subset(&self, other: &DependencySet) -> bool {
        self.words
            .iter()
            .zip(other.words.iter())
            .all(|(a, b)| a & !b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = WrapId> + '_ {
        (0..MAX_WRAPS)
            .filter(|&i| self.words[i / 64] & (1 << (i % 64)) != 0)
            .map(|i| WrapId(i as u16))
    }

    /// First `width` bits as a 0/1 vector.
    pub fn to_bits(&self, width: usize) -> Vec<u8> {
        (0..width.min(MAX_WRAPS))
            .map(|i| ((self.words[i / 64] >> (i % 64)) & 1) as u8)
            .collect()
    }
}

impl fmt::Debug for DependencySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(|w| w.index())).finish()
    }
}

/// Depset removal as a free function (returns the updated copy).
pub fn depset_remove(ds: DependencySet, w: WrapId) -> DependencySet {
    ds.without(w)
}

pub fn depset_is_empty(ds: DependencySet) -> bool {
    ds.is_empty()
}

/// Cache-line index in the simulated physical address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Address(pub u64);

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Home,
    Log,
}

/// Splits the line space into the home region `[0, home_lines)` followed by
/// the pass-through log region `[home_lines, home_lines + log_lines)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressMap {
    pub home_lines: u64,
    pub log_lines: u64,
}

impl AddressMap {
    pub fn new(home_lines: u64, log_lines: u64) -> Self {
        Self {
            home_lines,
            log_lines,
        }
    }

    pub fn log_base(&self) -> u64 {
        self.home_lines
    }

    pub fn region(&self, addr: Address) -> Result<Region> {
        if addr.0 < self.home_lines {
            Ok(Region::Home)
        } else if addr.0 < self.home_lines + self.log_lines {
            Ok(Region::Log)
        } else {
            Err(Error::BadAddress(addr))
        }
    }

    pub fn is_log(&self, addr: Address) -> bool {
        matches!(self.region(addr), Ok(Region::Log))
    }

    pub fn is_home(&self, addr: Address) -> bool {
        addr.0 < self.home_lines
    }

    pub fn home(&self, index: u64) -> Address {
        debug_assert!(index < self.home_lines);
        Address(index)
    }

    pub fn log(&self, offset: u64) -> Address {
        debug_assert!(offset < self.log_lines);
        Address(self.home_lines + offset)
    }
}

/// In-memory view of one per-wrap persistent log record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub owner: WrapId,
    pub start_time: Timestamp,
    pub persist_time: Option<Timestamp>,
    pub write_set: Vec<(Address, LineValue)>,
    pub end_marker: bool,
}

impl LogRecord {
    pub fn open(owner: WrapId, start_time: Timestamp) -> Self {
        Self {
            owner,
            start_time,
            persist_time: None,
            write_set: Vec::new(),
            end_marker: false,
        }
    }

    /// Checks the structural invariants a record must satisfy.
    pub fn validate(&self, map: &AddressMap) -> Result<()> {
        if let Some(p) = self.persist_time {
            if p <= self.start_time {
                return Err(Error::ProtocolViolation(format!(
                    "{}: persist time {p} not after start time {}",
                    self.owner, self.start_time
                )));
            }
        } else if self.end_marker {
            return Err(Error::ProtocolViolation(format!(
                "{}: end marker without persist time",
                self.owner
            )));
        }
        if let Some((a, _)) = self.write_set.iter().find(|(a, _)| !map.is_home(*a)) {
            return Err(Error::ProtocolViolation(format!(
                "{}: write set names non-home address {a}",
                self.owner
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(i: usize) -> WrapId {
        WrapId::new(i).unwrap()
    }

    #[test]
    fn remove_matches_worked_example() {
        let ds = DependencySet::from_bits(&[1, 1, 1, 0]);
        assert_eq!(depset_remove(ds, w(2)).to_bits(4), vec![1, 1, 0, 0]);
        let ds = DependencySet::from_bits(&[1, 0, 0, 1]);
        assert_eq!(depset_remove(ds, w(3)).to_bits(4), vec![1, 0, 0, 0]);
        assert_eq!(
            depset_remove(DependencySet::EMPTY, w(0)),
            DependencySet::EMPTY
        );
    }

    #[test]
    fn emptiness() {
        assert!(depset_is_empty(DependencySet::from_bits(&[0, 0, 0, 0])));
        assert!(!depset_is_empty(DependencySet::from_bits(&[1, 0, 0, 0])));
        assert!(!depset_is_empty(DependencySet::from_bits(&[0, 0, 0, 1])));
    }

    #[test]
    fn wrap_id_bound() {
        assert!(WrapId::new(MAX_WRAPS - 1).is_ok());
        assert!(matches!(WrapId::new(MAX_WRAPS), Err(Error::Config(_))));
    }

    #[test]
    fn clock_is_strictly_increasing_from_one() {
        let mut c = Clock::new();
        let a = c.now();
        let b = c.now();
        assert_eq!(a.get(), 1);
        assert!(a < b);
        assert!(Timestamp::new(0).is_none());
    }

    #[test]
    fn region_split() {
        let m = AddressMap::new(8, 4);
        assert_eq!(m.region(Address(7)).unwrap(), Region::Home);
        assert_eq!(m.region(Address(8)).unwrap(), Region::Log);
        assert_eq!(m.region(Address(11)).unwrap(), Region::Log);
        assert!(m.region(Address(12)).is_err());
    }

    #[test]
    fn record_validation() {
        let m = AddressMap::new(8, 16);
        let mut r = LogRecord::open(w(0), Timestamp::new(5).unwrap());
        r.end_marker = true;
        assert!(r.validate(&m).is_err());
        r.persist_time = Timestamp::new(3);
        assert!(r.validate(&m).is_err());
        r.persist_time = Timestamp::new(9);
        r.write_set.push((Address(2), 7));
        assert!(r.validate(&m).is_ok());
        r.write_set.push((Address(9), 7));
        assert!(r.validate(&m).is_err());
    }

    proptest! {
        #[test]
        fn removing_every_member_empties(bits in proptest::collection::vec(0u8..2, 1..MAX_WRAPS)) {
            let ds = DependencySet::from_bits(&bits);
            let members: Vec<_> = ds.iter().collect();
            prop_assert_eq!(members.len(), ds.len());
            let cleared = members.iter().fold(ds, |acc, &m| depset_remove(acc, m));
            prop_assert!(depset_is_empty(cleared));
        }

        #[test]
        fn remove_touches_one_bit(bits in proptest::collection::vec(0u8..2, MAX_WRAPS), i in 0..MAX_WRAPS) {
            let ds = DependencySet::from_bits(&bits);
            let out = ds.without(w(i));
            for j in 0..MAX_WRAPS {
                if j == i {
                    prop_assert!(!out.contains(w(j)));
                } else {
                    prop_assert_eq!(out.contains(w(j)), ds.contains(w(j)));
                }
            }
            prop_assert!(out.is_subset(&ds));
        }
    }
}
