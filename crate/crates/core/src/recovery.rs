//! Post-crash recovery: decide which logs may be replayed and replay them
//! in persist-timestamp order.
//!
//! A record is complete when its end marker validates. Every incomplete
//! record contributes a bound: its persist timestamp if that line made it to
//! memory, otherwise its start timestamp. Complete records whose persist
//! timestamp lies below the smallest bound are replayed, oldest first.
//!
//! Using the persist timestamp of an incomplete record is sound: that
//! record committed at its persist time, so it cannot precede any record
//! that committed earlier, and none of its data can have left the delay
//! buffer before its own close. The start-only bound ([`TminRule::StartOnly`])
//! is kept for comparison; it refuses replays the worked example expects.

use serde::{Deserialize, Serialize};

use crate::domain::{Address, LineValue, Timestamp, WrapId};
use crate::error::Result;
use crate::log_layout::DecodedRecord;
use crate::memory::PmImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TminRule {
    /// Incomplete records bound replay by persist time when it is durable.
    #[default]
    PersistAware,
    /// Incomplete records always bound replay by their start time.
    StartOnly,
}

/// Identifies one log record slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordId {
    pub wrap: WrapId,
    pub slot: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordSummary {
    pub id: RecordId,
    pub start_time: Timestamp,
    pub persist_time: Option<Timestamp>,
    /// Empty for incomplete records.
    pub write_set: Vec<(Address, LineValue)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub incomplete: Vec<RecordSummary>,
    pub complete: Vec<RecordSummary>,
    /// `None` stands for +infinity (no incomplete record).
    pub t_min: Option<Timestamp>,
    /// Replayed records in replay (ascending persist time) order.
    pub replayed: Vec<RecordSummary>,
    pub final_image: PmImage,
}

impl RecoveryReport {
    pub fn replayed_wraps(&self) -> Vec<WrapId> {
        self.replayed.iter().map(|r| r.id.wrap).collect()
    }

    pub fn incomplete_wraps(&self) -> Vec<WrapId> {
        self.incomplete.iter().map(|r| r.id.wrap).collect()
    }
}

fn summary(r: &DecodedRecord) -> RecordSummary {
    RecordSummary {
        id: RecordId {
            wrap: r.wrap,
            slot: r.slot,
        },
        start_time: r.start_time,
        persist_time: r.persist_time,
        write_set: r.write_set.clone().unwrap_or_default(),
    }
}

pub fn recover(image: &PmImage) -> Result<RecoveryReport> {
    recover_with(image, TminRule::PersistAware)
}

/// Recovers a crash image. The log area of the returned image is left
/// intact, so recovering it again replays the same records.
pub fn recover_with(image: &PmImage, rule: TminRule) -> Result<RecoveryReport> {
    let records = image.log_records()?;
    let (complete, incomplete): (Vec<&DecodedRecord>, Vec<&DecodedRecord>) =
        records.iter().partition(|r| r.is_complete());
    let t_min = incomplete
        .iter()
        .map(|r| match rule {
            TminRule::PersistAware => r.persist_time.unwrap_or(r.start_time),
            TminRule::StartOnly => r.start_time,
        })
        .min();

    let mut replay: Vec<&DecodedRecord> = complete
        .iter()
        .copied()
        .filter(|r| {
            let p = r.persist_time.expect("complete records carry a persist time");
            t_min.is_none_or(|m| p < m)
        })
        .collect();
    replay.sort_by_key(|r| r.persist_time);

    let mut final_image = image.clone();
    for r in &replay {
        let ws: &[(Address, LineValue)] = r.write_set.as_deref().unwrap_or_default();
        let map = image.address_map();
        for &(a, v) in ws {
            if map.is_home(a) {
                final_image.write(a, v);
            }
        }
    }
    Ok(RecoveryReport {
        incomplete: incomplete.into_iter().map(summary).collect(),
        complete: complete.into_iter().map(summary).collect(),
        t_min,
        replayed: replay.into_iter().map(summary).collect(),
        final_image,
    })
}
