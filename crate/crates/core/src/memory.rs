//! Persistent memory image and the volatile last-level cache model.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};

use crate::domain::{Address, AddressMap, LineValue, TxnId, WrapId};
use crate::error::{Error, Result};
use crate::log_layout::{decode_slot, DecodedRecord, LogGeometry};

const IMAGE_MAGIC: &[u8; 8] = b"WRAPPM01";

/// Contents of persistent memory: the home region plus the log area.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PmImage {
    geometry: LogGeometry,
    home: Vec<LineValue>,
    log: Vec<LineValue>,
}

impl PmImage {
    pub fn new(home_lines: u64, geometry: LogGeometry) -> Self {
        Self {
            geometry,
            home: vec![0; home_lines as usize],
            log: vec![0; geometry.total_lines() as usize],
        }
    }

    pub fn address_map(&self) -> AddressMap {
        AddressMap::new(self.home.len() as u64, self.log.len() as u64)
    }

    pub fn geometry(&self) -> &LogGeometry {
        &self.geometry
    }

    pub fn home(&self) -> &[LineValue] {
        &self.home
    }

    pub fn home_mut(&mut self) -> &mut [LineValue] {
        &mut self.home
    }

    pub fn log_area(&self) -> &[LineValue] {
        &self.log
    }

    pub fn read(&self, addr: Address) -> LineValue {
        let i = addr.0 as usize;
        if i < self.home.len() {
            self.home[i]
        } else {
            self.log[i - self.home.len()]
        }
    }

    pub fn write(&mut self, addr: Address, value: LineValue) {
        let i = addr.0 as usize;
        if i < self.home.len() {
            self.home[i] = value;
        } else {
            let h = self.home.len();
            self.log[i - h] = value;
        }
    }

    pub fn slot_lines(&self, wrap: WrapId, slot: u32) -> &[LineValue] {
        let base = self.geometry.slot_base(wrap, slot) as usize;
        &self.log[base..base + self.geometry.record_lines() as usize]
    }

    /// Decodes every used slot of the log area, in wrap-major slot order.
    pub fn log_records(&self) -> Result<Vec<DecodedRecord>> {
        let mut out = Vec::new();
        for wi in 0..self.geometry.wraps as usize {
            let wrap = WrapId::new(wi)?;
            for slot in 0..self.geometry.slots_per_wrap {
                if let Some(r) = decode_slot(&self.geometry, wrap, slot, self.slot_lines(wrap, slot))? {
                    out.push(r);
                }
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * (self.home.len() + self.log.len()));
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&(self.home.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.geometry.wraps.to_le_bytes());
        out.extend_from_slice(&self.geometry.slots_per_wrap.to_le_bytes());
        out.extend_from_slice(&self.geometry.ws_capacity.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in self.home.iter().chain(self.log.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::BadImage(m.to_string());
        if bytes.len() < 32 || &bytes[..8] != IMAGE_MAGIC {
            return Err(bad("missing header"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let home_lines = u64_at(8) as usize;
        let geometry = LogGeometry::new(u32_at(16), u32_at(20), u32_at(24));
        let log_lines = geometry.total_lines() as usize;
        let body = &bytes[32..];
        if body.len() != 8 * (home_lines + log_lines) {
            return Err(bad("body length does not match header"));
        }
        let mut words = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()));
        let home = words.by_ref().take(home_lines).collect();
        let log = words.collect();
        Ok(Self { geometry, home, log })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

/// One resident line of the shared cache.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheLine {
    /// Committed (globally visible) value. Speculative values live in the
    /// owning HTM section's buffer until commit.
    pub value: LineValue,
    pub dirty: bool,
    /// Thread whose active HTM section has written this line; pins it.
    pub spec_owner: Option<usize>,
    /// Transaction that produced `value` (simulation-only tag).
    pub provenance: Option<TxnId>,
}

/// Single shared last-level cache with dirty tracking.
///
/// Speculatively written lines are pinned and never chosen for eviction.
#[derive(Debug, Clone)]
pub struct CacheModel {
    lines: HashMap<Address, CacheLine>,
    /// Dirty, unpinned lines: the scheduler's eviction candidates.
    evictable: IndexSet<Address>,
    /// Unpinned resident lines: capacity-eviction victims.
    unpinned: IndexSet<Address>,
    capacity: usize,
}

impl CacheModel {
    pub fn new(capacity: usize) -> Self {
        Self {
            lines: HashMap::new(),
            evictable: IndexSet::new(),
            unpinned: IndexSet::new(),
            capacity: capacity.max(1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn get(&self, addr: Address) -> Option<&CacheLine> {
        self.lines.get(&addr)
    }

    pub fn contains(&self, addr: Address) -> bool {
        self.lines.contains_key(&addr)
    }

    pub fn is_full(&self) -> bool {
        self.lines.len() >= self.capacity
    }

    pub fn evictable(&self) -> &IndexSet<Address> {
        &self.evictable
    }

    pub fn unpinned(&self) -> &IndexSet<Address> {
        &self.unpinned
    }

    pub fn pinned_count(&self) -> usize {
        self.lines.len() - self.unpinned.len()
    }

    fn reindex(&mut self, addr: Address) {
        match self.lines.get(&addr) {
            Some(l) if l.spec_owner.is_none() => {
                self.unpinned.insert(addr);
                if l.dirty {
                    self.evictable.insert(addr);
                } else {
                    self.evictable.swap_remove(&addr);
                }
            }
            _ => {
                self.unpinned.swap_remove(&addr);
                self.evictable.swap_remove(&addr);
            }
        }
    }

    /// Inserts a clean copy fetched from memory. Caller has made room.
    pub fn fill(&mut self, addr: Address, value: LineValue, provenance: Option<TxnId>) {
        debug_assert!(!self.lines.contains_key(&addr));
        self.lines.insert(
            addr,
            CacheLine {
                value,
                dirty: false,
                spec_owner: None,
                provenance,
            },
        );
        self.reindex(addr);
    }

    /// Non-speculative store to a resident line.
    pub fn store(&mut self, addr: Address, value: LineValue, provenance: Option<TxnId>) {
        let line = self.lines.get_mut(&addr).expect("store to non-resident line");
        line.value = value;
        line.dirty = true;
        line.provenance = provenance;
        self.reindex(addr);
    }

    pub fn pin(&mut self, addr: Address, owner: usize) {
        let line = self.lines.get_mut(&addr).expect("pin of non-resident line");
        debug_assert!(line.spec_owner.is_none() || line.spec_owner == Some(owner));
        line.spec_owner = Some(owner);
        self.reindex(addr);
    }

    /// Drops the pin without changing the committed value (abort path).
    pub fn unpin(&mut self, addr: Address) {
        if let Some(line) = self.lines.get_mut(&addr) {
            line.spec_owner = None;
            self.reindex(addr);
        }
    }

    /// Publishes a speculative value at commit.
    pub fn commit_spec(&mut self, addr: Address, value: LineValue, provenance: Option<TxnId>) {
        let line = self.lines.get_mut(&addr).expect("commit of non-resident line");
        line.spec_owner = None;
        line.value = value;
        line.dirty = true;
        line.provenance = provenance;
        self.reindex(addr);
    }

    /// Write-back that keeps the line resident (clwb semantics).
    pub fn clean(&mut self, addr: Address) -> Option<CacheLine> {
        let line = self.lines.get_mut(&addr)?;
        if !line.dirty || line.spec_owner.is_some() {
            return None;
        }
        line.dirty = false;
        let copy = line.clone();
        self.reindex(addr);
        Some(copy)
    }

    /// Removes the line from the cache, returning it.
    pub fn remove(&mut self, addr: Address) -> Option<CacheLine> {
        let l = self.lines.remove(&addr)?;
        self.unpinned.swap_remove(&addr);
        self.evictable.swap_remove(&addr);
        Some(l)
    }

    /// Drops every line (crash).
    pub fn clear(&mut self) {
        self.lines.clear();
        self.unpinned.clear();
        self.evictable.clear();
    }

    /// Dirty home lines, sorted, for full-cache flushes.
    pub fn dirty_lines(&self, map: &AddressMap) -> Vec<Address> {
        let mut v: Vec<Address> = self
            .evictable
            .iter()
            .copied()
            .filter(|a| map.is_home(*a))
            .collect();
        v.sort();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trip_bytes() {
        let g = LogGeometry::new(2, 2, 3);
        let mut img = PmImage::new(5, g);
        img.write(Address(1), 42);
        img.write(Address(5), 7);
        img.write(Address(5 + g.total_lines() - 1), 9);
        let back = PmImage::from_bytes(&img.to_bytes()).unwrap();
        assert_eq!(back, img);
        assert!(PmImage::from_bytes(&img.to_bytes()[..40]).is_err());
    }

    #[test]
    fn image_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pm.img");
        let mut img = PmImage::new(3, LogGeometry::new(1, 1, 1));
        img.write(Address(2), 11);
        img.save(&p).unwrap();
        assert_eq!(PmImage::load(&p).unwrap(), img);
    }

    #[test]
    fn pinned_lines_are_not_evictable() {
        let mut c = CacheModel::new(4);
        c.fill(Address(1), 0, None);
        c.store(Address(1), 5, None);
        assert!(c.evictable().contains(&Address(1)));
        c.pin(Address(1), 0);
        assert!(!c.evictable().contains(&Address(1)));
        assert!(!c.unpinned().contains(&Address(1)));
        c.commit_spec(Address(1), 6, None);
        assert!(c.evictable().contains(&Address(1)));
        assert_eq!(c.get(Address(1)).unwrap().value, 6);
    }

    #[test]
    fn last_store_wins_and_clean_keeps_line() {
        let mut c = CacheModel::new(4);
        c.fill(Address(2), 0, None);
        c.store(Address(2), 1, None);
        c.store(Address(2), 2, None);
        let written = c.clean(Address(2)).unwrap();
        assert_eq!(written.value, 2);
        assert!(c.contains(Address(2)));
        assert!(c.evictable().is_empty());
        assert!(c.clean(Address(2)).is_none());
    }
}
