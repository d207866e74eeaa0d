//! Binary layout of the persistent log area.
//!
//! The log area is an array of fixed-size record slots, `slots_per_wrap` of
//! them for every wrap id, laid out wrap-major. Each slot is
//!
//! ```text
//! line 0            start time (0 = slot unused)
//! line 1            persist time (0 = unset)
//! line 2 + 2i       write-set entry i: home address
//! line 3 + 2i       write-set entry i: value
//! line 2 + 2*cap    end marker: magic(16) | count(16) | checksum(32)
//! ```
//!
//! All lines are little-endian `u64`s in image dumps. The end marker is only
//! stored once every other line of the record is durable, so a valid magic
//! with a bad checksum means the writer broke that ordering.

use serde::{Deserialize, Serialize};

use crate::domain::{Address, LineValue, Timestamp, WrapId};
use crate::error::{Error, Result};

pub const END_MAGIC: u64 = 0xA5A5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LogGeometry {
    pub wraps: u32,
    pub slots_per_wrap: u32,
    pub ws_capacity: u32,
}

impl LogGeometry {
    pub fn new(wraps: u32, slots_per_wrap: u32, ws_capacity: u32) -> Self {
        Self {
            wraps,
            slots_per_wrap,
            ws_capacity,
        }
    }

    pub fn record_lines(&self) -> u64 {
        3 + 2 * self.ws_capacity as u64
    }

    pub fn total_lines(&self) -> u64 {
        self.wraps as u64 * self.slots_per_wrap as u64 * self.record_lines()
    }

    /// Offset of a slot's first line within the log area.
    pub fn slot_base(&self, wrap: WrapId, slot: u32) -> u64 {
        debug_assert!(slot < self.slots_per_wrap);
        (wrap.index() as u64 * self.slots_per_wrap as u64 + slot as u64) * self.record_lines()
    }

    pub fn header_offset(&self, wrap: WrapId, slot: u32) -> u64 {
        self.slot_base(wrap, slot)
    }

    pub fn persist_offset(&self, wrap: WrapId, slot: u32) -> u64 {
        self.slot_base(wrap, slot) + 1
    }

    pub fn entry_offsets(&self, wrap: WrapId, slot: u32, index: u32) -> (u64, u64) {
        let base = self.slot_base(wrap, slot) + 2 + 2 * index as u64;
        (base, base + 1)
    }

    pub fn end_offset(&self, wrap: WrapId, slot: u32) -> u64 {
        self.slot_base(wrap, slot) + 2 + 2 * self.ws_capacity as u64
    }
}

/// FNV-1a over the record's significant words, folded to 32 bits.
pub fn record_checksum(start: u64, persist: u64, entries: &[(Address, LineValue)]) -> u32 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |word: u64| {
        for b in word.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    feed(start);
    feed(persist);
    feed(entries.len() as u64);
    for (a, v) in entries {
        feed(a.0);
        feed(*v);
    }
    (h ^ (h >> 32)) as u32
}

pub fn encode_end_marker(count: usize, checksum: u32) -> u64 {
    (END_MAGIC << 48) | ((count as u64 & 0xffff) << 32) | checksum as u64
}

/// A record read back from the log area.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedRecord {
    pub wrap: WrapId,
    pub slot: u32,
    pub start_time: Timestamp,
    /// Persist time, when its line is durable and consistent with the start.
    pub persist_time: Option<Timestamp>,
    /// Present only when the end marker validated.
    pub write_set: Option<Vec<(Address, LineValue)>>,
}

impl DecodedRecord {
    pub fn is_complete(&self) -> bool {
        self.write_set.is_some()
    }
}

/// Decodes one slot; `lines` must be exactly the slot's lines.
///
/// Returns `Ok(None)` for an unused slot.
pub fn decode_slot(
    geometry: &LogGeometry,
    wrap: WrapId,
    slot: u32,
    lines: &[LineValue],
) -> Result<Option<DecodedRecord>> {
    debug_assert_eq!(lines.len() as u64, geometry.record_lines());
    let Some(start_time) = Timestamp::new(lines[0]) else {
        return Ok(None);
    };
    // A persist line older than the start belongs to an earlier record.
    let persist_time = Timestamp::new(lines[1]).filter(|p| *p > start_time);
    let end = lines[lines.len() - 1];
    let corrupt = |reason: String| Error::CorruptLog { wrap, slot, reason };

    let write_set = if end >> 48 == END_MAGIC {
        let count = ((end >> 32) & 0xffff) as usize;
        if count > geometry.ws_capacity as usize {
            return Err(corrupt(format!("entry count {count} over capacity")));
        }
        let Some(p) = persist_time else {
            return Err(corrupt("end marker without persist time".into()));
        };
        let entries: Vec<(Address, LineValue)> = (0..count)
            .map(|i| (Address(lines[2 + 2 * i]), lines[3 + 2 * i]))
            .collect();
        let sum = record_checksum(start_time.get(), p.get(), &entries);
        if sum != end as u32 {
            return Err(corrupt(format!(
                "checksum mismatch (stored {:08x}, computed {sum:08x})",
                end as u32
            )));
        }
        Some(entries)
    } else {
        None
    };

    Ok(Some(DecodedRecord {
        wrap,
        slot,
        start_time,
        persist_time,
        write_set,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines_for(g: &LogGeometry, start: u64, persist: u64, entries: &[(Address, u64)]) -> Vec<u64> {
        let mut v = vec![0; g.record_lines() as usize];
        v[0] = start;
        v[1] = persist;
        for (i, (a, x)) in entries.iter().enumerate() {
            v[2 + 2 * i] = a.0;
            v[3 + 2 * i] = *x;
        }
        let last = v.len() - 1;
        v[last] = encode_end_marker(entries.len(), record_checksum(start, persist, entries));
        v
    }

    #[test]
    fn complete_record_round_trips() {
        let g = LogGeometry::new(2, 1, 4);
        let w = WrapId::new(1).unwrap();
        let entries = [(Address(3), 9), (Address(3), 10)];
        let lines = lines_for(&g, 4, 7, &entries);
        let r = decode_slot(&g, w, 0, &lines).unwrap().unwrap();
        assert!(r.is_complete());
        assert_eq!(r.write_set.unwrap(), entries.to_vec());
        assert_eq!(r.persist_time.unwrap().get(), 7);
    }

    #[test]
    fn torn_record_is_incomplete_or_corrupt() {
        let g = LogGeometry::new(1, 1, 4);
        let w = WrapId::new(0).unwrap();
        let mut lines = lines_for(&g, 4, 7, &[(Address(1), 5)]);
        let last = lines.len() - 1;
        let marker = lines[last];
        lines[last] = 0;
        assert!(!decode_slot(&g, w, 0, &lines).unwrap().unwrap().is_complete());
        lines[last] = marker;
        lines[3] = 6;
        assert!(matches!(
            decode_slot(&g, w, 0, &lines),
            Err(Error::CorruptLog { .. })
        ));
    }

    #[test]
    fn unused_and_stale_persist() {
        let g = LogGeometry::new(1, 1, 2);
        let w = WrapId::new(0).unwrap();
        let mut lines = vec![0; g.record_lines() as usize];
        assert!(decode_slot(&g, w, 0, &lines).unwrap().is_none());
        lines[0] = 10;
        lines[1] = 3;
        let r = decode_slot(&g, w, 0, &lines).unwrap().unwrap();
        assert_eq!(r.persist_time, None);
    }

    #[test]
    fn offsets_do_not_overlap() {
        let g = LogGeometry::new(3, 2, 4);
        let mut seen = std::collections::BTreeSet::new();
        for wi in 0..3 {
            let w = WrapId::new(wi).unwrap();
            for s in 0..2 {
                assert!(seen.insert(g.header_offset(w, s)));
                assert!(seen.insert(g.persist_offset(w, s)));
                for i in 0..4 {
                    let (a, b) = g.entry_offsets(w, s, i);
                    assert!(seen.insert(a) && seen.insert(b));
                }
                assert!(seen.insert(g.end_offset(w, s)));
            }
        }
        assert_eq!(seen.len() as u64, g.total_lines());
        assert_eq!(*seen.iter().next_back().unwrap(), g.total_lines() - 1);
    }
}
