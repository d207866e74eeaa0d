//! Correctness oracle for crash images and trace-level protocol properties.
//!
//! The oracle derives, from the commit order and per-transaction read and
//! write sets, every persistent state that reflects a dependency-closed
//! subset of the committed transactions. A recovered image is acceptable
//! when some such subset explains it and that subset contains every
//! transaction that was already guaranteed durable at the crash.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::domain::{Address, LineValue, TxnId};
use crate::engine::{inject_crash, Method, PmWriteKind, Trace, WrapRecord};
use crate::error::{Error, Result};
use crate::memory::PmImage;
use crate::ptl::ptl_recover;
use crate::recovery::{recover, RecordSummary, RecoveryReport};

/// Default bound on the transactions the oracle will branch over.
pub const SCALE_LIMIT: usize = 20;

/// How many post-drain crash points are probed per transaction.
const POST_DRAIN_PROBES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// No dependency-closed subset of the committed transactions explains the image.
    Membership,
    /// A transaction's home updates are only partly present.
    Atomicity,
    /// A transaction already guaranteed durable is missing.
    StrictDurability,
    /// Recovery replayed a log that does not belong to a committed transaction.
    ReplayedUncommitted,
    /// Data of a transaction reached memory before it committed.
    SpeculativeLeak,
    /// Recovery itself failed.
    Recovery,
    /// A predecessor started after its successor's persist timestamp.
    PredecessorStart,
    /// Data reached memory while an earlier-started wrap was open or unlogged.
    EarlyData,
    /// A closed wrap with data in memory is not replayed by a later crash.
    NotReplayed,
    /// Data is in memory but the wrap or one of its predecessors has no durable log.
    UndurableLog,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub tick: Option<u64>,
    pub txns: Vec<TxnId>,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub crash_tick: Option<u64>,
    /// Strict-durability signals that had fired before the crash.
    pub strict_obligations: usize,
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("verdicts serialize")
    }

    fn push(&mut self, kind: ViolationKind, tick: Option<u64>, txns: Vec<TxnId>, detail: String) {
        self.violations.push(Violation {
            kind,
            tick,
            txns,
            detail,
        });
    }

    pub fn merge(&mut self, other: Verdict) {
        self.strict_obligations += other.strict_obligations;
        self.violations.extend(other.violations);
    }
}

/// Direct precedence edges over transactions listed in commit order:
/// `preds[i]` holds every earlier `j` whose footprint conflicts with `i`
/// (read-from, write-after-write or write-after-read).
pub fn prec(order: &[&WrapRecord]) -> Vec<Vec<usize>> {
    let mut preds = vec![Vec::new(); order.len()];
    for (i, x) in order.iter().enumerate() {
        for (j, y) in order[..i].iter().enumerate() {
            let raw = !y.write_set.is_disjoint(&x.read_set);
            let waw = !y.write_set.is_disjoint(&x.write_set);
            let war = !y.read_set.is_disjoint(&x.write_set);
            if raw || waw || war {
                preds[i].push(j);
            }
        }
    }
    preds
}

/// The committed prefix of a trace, ready for state enumeration and
/// membership queries over the home region.
#[derive(Debug, Clone)]
pub struct Oracle<'a> {
    initial: Vec<LineValue>,
    order: Vec<&'a WrapRecord>,
    preds: Vec<Vec<usize>>,
    /// Final value each transaction leaves in each line it writes.
    last: Vec<Vec<(usize, LineValue)>>,
    /// Per line, the transactions writing it and the value they leave.
    writers: BTreeMap<usize, Vec<(usize, LineValue)>>,
}

impl<'a> Oracle<'a> {
    /// Transactions committed at or before `tick` (all when `None`).
    pub fn new(trace: &'a Trace, tick: Option<u64>) -> Self {
        let order: Vec<&WrapRecord> = trace
            .commit_order()
            .into_iter()
            .filter(|w| tick.is_none_or(|k| w.committed_by(k)))
            .collect();
        let preds = prec(&order);
        let last: Vec<Vec<(usize, LineValue)>> = order
            .iter()
            .map(|w| {
                w.last_writes()
                    .into_iter()
                    .map(|(a, v)| (a.0 as usize, v))
                    .collect()
            })
            .collect();
        let mut writers: BTreeMap<usize, Vec<(usize, LineValue)>> = BTreeMap::new();
        for (i, lw) in last.iter().enumerate() {
            for &(l, v) in lw {
                writers.entry(l).or_default().push((i, v));
            }
        }
        Self {
            initial: trace.initial_image.home().to_vec(),
            order,
            preds,
            last,
            writers,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn txns(&self) -> Vec<TxnId> {
        self.order.iter().map(|w| w.txn).collect()
    }

    pub fn position(&self, txn: TxnId) -> Option<usize> {
        self.order.iter().position(|w| w.txn == txn)
    }

    fn apply(&self, included: &[bool]) -> Vec<LineValue> {
        let mut img = self.initial.clone();
        for (i, lw) in self.last.iter().enumerate() {
            if included[i] {
                for &(l, v) in lw {
                    img[l] = v;
                }
            }
        }
        img
    }

    /// Home images of every dependency-closed subset, applied in commit order.
    pub fn states(&self, limit: usize) -> Result<BTreeSet<Vec<LineValue>>> {
        if self.len() > limit {
            return Err(Error::ScaleLimit {
                count: self.len(),
                limit,
            });
        }
        let mut out = BTreeSet::new();
        let mut included = vec![false; self.len()];
        self.enumerate(0, &mut included, &mut out);
        Ok(out)
    }

    fn enumerate(&self, i: usize, included: &mut Vec<bool>, out: &mut BTreeSet<Vec<LineValue>>) {
        if i == self.len() {
            out.insert(self.apply(included));
            return;
        }
        included[i] = false;
        self.enumerate(i + 1, included, out);
        if self.preds[i].iter().all(|&p| included[p]) {
            included[i] = true;
            self.enumerate(i + 1, included, out);
            included[i] = false;
        }
    }

    /// Finds a dependency-closed subset containing every `must` transaction
    /// whose image equals `home`. Returns the subset as inclusion flags.
    pub fn explain(&self, home: &[LineValue], must: &[bool], limit: usize) -> Result<Option<Vec<bool>>> {
        let free = must.iter().filter(|m| !**m).count();
        if free > limit {
            return Err(Error::ScaleLimit { count: free, limit });
        }
        for (l, (&h, &init)) in home.iter().zip(&self.initial).enumerate() {
            if h != init && !self.writers.contains_key(&l) {
                return Ok(None);
            }
        }
        let mut s = Search {
            o: self,
            home,
            must,
            required: vec![0; self.len()],
            determined: vec![false; home.len()],
            included: vec![false; self.len()],
        };
        Ok(s.run(self.len()).then_some(s.included))
    }
}

struct Search<'o, 'a> {
    o: &'o Oracle<'a>,
    home: &'o [LineValue],
    must: &'o [bool],
    required: Vec<u32>,
    determined: Vec<bool>,
    included: Vec<bool>,
}

impl Search<'_, '_> {
    /// Decides transactions `i-1` down to `0`; later ones are fixed.
    fn run(&mut self, i: usize) -> bool {
        if i == 0 {
            return self
                .o
                .writers
                .keys()
                .all(|&l| self.determined[l] || self.home[l] == self.o.initial[l]);
        }
        let x = i - 1;
        let forced = self.must[x] || self.required[x] > 0;
        let lw = &self.o.last[x];
        if lw
            .iter()
            .all(|&(l, v)| self.determined[l] || self.home[l] == v)
        {
            let newly: Vec<usize> = lw
                .iter()
                .filter(|(l, _)| !self.determined[*l])
                .map(|(l, _)| *l)
                .collect();
            for &l in &newly {
                self.determined[l] = true;
            }
            for &p in &self.o.preds[x] {
                self.required[p] += 1;
            }
            self.included[x] = true;
            if self.run(x) {
                return true;
            }
            self.included[x] = false;
            for &p in &self.o.preds[x] {
                self.required[p] -= 1;
            }
            for &l in &newly {
                self.determined[l] = false;
            }
        }
        if forced || !self.exclusion_possible(x) {
            return false;
        }
        self.run(x)
    }

    /// Every undetermined line of `x` can still be explained without it.
    fn exclusion_possible(&self, x: usize) -> bool {
        self.o.last[x].iter().all(|&(l, _)| {
            self.determined[l]
                || self.home[l] == self.o.initial[l]
                || self.o.writers[&l]
                    .iter()
                    .any(|&(j, v)| j < x && v == self.home[l])
        })
    }
}

/// Home images reachable by a crash after the full trace.
pub fn consistent_states(trace: &Trace) -> Result<BTreeSet<Vec<LineValue>>> {
    Oracle::new(trace, None).states(SCALE_LIMIT)
}

/// The image recovery produces for a crash at `tick`, with the replay report
/// for WrAP methods.
pub fn recovered_image(trace: &Trace, tick: u64) -> Result<(Vec<LineValue>, Option<RecoveryReport>)> {
    recover_for(trace.method, &inject_crash(trace, tick)?.image)
}

fn recover_for(method: Method, image: &PmImage) -> Result<(Vec<LineValue>, Option<RecoveryReport>)> {
    match method {
        Method::Wrap | Method::WrapStrict => {
            let r = recover(image)?;
            Ok((r.final_image.home().to_vec(), Some(r)))
        }
        Method::PtlEager => Ok((ptl_recover(image)?.image.home().to_vec(), None)),
        Method::HtmOnly => Ok((image.home().to_vec(), None)),
    }
}

fn record_of<'a>(trace: &'a Trace, r: &RecordSummary) -> Option<&'a WrapRecord> {
    trace.wraps.iter().find(|w| {
        w.wrap == Some(r.id.wrap) && w.slot == Some(r.id.slot) && w.start_ts == Some(r.start_time)
    })
}

/// Transactions that must survive a crash at `tick`: strict commits whose
/// signal fired, logs retired by cleanup, and every PTL commit.
fn durable_by(trace: &Trace, w: &WrapRecord, tick: u64) -> bool {
    match trace.method {
        Method::PtlEager => w.committed_by(tick),
        _ => {
            (w.strict && w.signal_tick.is_some_and(|s| s <= tick))
                || w.cleaned_tick.is_some_and(|c| c <= tick)
        }
    }
}

/// Crashes `trace` at `tick`, recovers, and checks the result against the
/// oracle, per-transaction atomicity and durability obligations.
pub fn check_crash_consistency(trace: &Trace, tick: u64) -> Result<Verdict> {
    check_crash_consistency_with(trace, tick, SCALE_LIMIT)
}

pub fn check_crash_consistency_with(trace: &Trace, tick: u64, limit: usize) -> Result<Verdict> {
    let image = inject_crash(trace, tick)?.image;
    check_image(trace, tick, &image, limit)
}

/// Checks the crash image of `tick`, already built by the caller.
fn check_image(trace: &Trace, tick: u64, image: &PmImage, limit: usize) -> Result<Verdict> {
    if trace.method == Method::HtmOnly {
        return Err(Error::Config(
            "HTM_ONLY has no persistence guarantee to check".into(),
        ));
    }
    let mut v = Verdict {
        crash_tick: Some(tick),
        ..Default::default()
    };
    let (home, report) = match recover_for(trace.method, image) {
        Ok(x) => x,
        Err(e) => {
            v.push(ViolationKind::Recovery, Some(tick), vec![], e.to_string());
            return Ok(v);
        }
    };
    let oracle = Oracle::new(trace, Some(tick));
    let must: Vec<bool> = oracle
        .order
        .iter()
        .map(|w| durable_by(trace, w, tick))
        .collect();
    v.strict_obligations = oracle
        .order
        .iter()
        .filter(|w| w.strict && w.signal_tick.is_some_and(|s| s <= tick))
        .count();

    if let Some(r) = &report {
        for s in &r.replayed {
            match record_of(trace, s) {
                Some(w) if w.committed_by(tick) => {
                    if w.last_writes() != home_last_writes(trace, &s.write_set) {
                        v.push(
                            ViolationKind::Recovery,
                            Some(tick),
                            vec![w.txn],
                            "replayed write set differs from committed writes".into(),
                        );
                    }
                }
                other => v.push(
                    ViolationKind::ReplayedUncommitted,
                    Some(tick),
                    other.map(|w| vec![w.txn]).unwrap_or_default(),
                    format!("replayed record {:?} has no committed owner", s.id),
                ),
            }
        }
    }

    if trace.method.uses_wrap() {
        speculative_leaks(trace, tick, &mut v);
        atomicity(trace, &oracle, tick, report.as_ref(), &mut v);
    }

    match oracle.explain(&home, &must, limit)? {
        Some(_) => {}
        None => {
            let relaxed = vec![false; oracle.len()];
            if oracle.explain(&home, &relaxed, limit)?.is_some() {
                let missing: Vec<TxnId> = oracle
                    .order
                    .iter()
                    .zip(&must)
                    .filter(|(_, m)| **m)
                    .map(|(w, _)| w.txn)
                    .collect();
                v.push(
                    ViolationKind::StrictDurability,
                    Some(tick),
                    missing,
                    "image is consistent only if some durable transaction is dropped".into(),
                );
            } else {
                v.push(
                    ViolationKind::Membership,
                    Some(tick),
                    vec![],
                    format!("recovered home image {home:?} matches no consistent state"),
                );
            }
        }
    }
    Ok(v)
}

fn home_last_writes(trace: &Trace, ws: &[(Address, LineValue)]) -> Vec<(Address, LineValue)> {
    let map = trace.initial_image.address_map();
    let m: BTreeMap<_, _> = ws.iter().copied().filter(|(a, _)| map.is_home(*a)).collect();
    m.into_iter().collect()
}

fn speculative_leaks(trace: &Trace, tick: u64, v: &mut Verdict) {
    let map = trace.initial_image.address_map();
    for w in trace.pm_writes.iter().take_while(|w| w.tick <= tick) {
        let Some(p) = w.provenance else { continue };
        if !map.is_home(w.addr) {
            continue;
        }
        let committed = trace
            .record(p)
            .is_some_and(|r| r.commit_tick.is_some_and(|c| c <= w.tick));
        if !committed {
            v.push(
                ViolationKind::SpeculativeLeak,
                Some(w.tick),
                vec![p],
                format!("{} reached memory before its transaction committed", w.addr),
            );
        }
    }
}

/// Tracks which transaction put each home line's value into the recovered
/// image; a transaction with some lines present must have all of them
/// present or overwritten by a later transaction.
fn atomicity(trace: &Trace, oracle: &Oracle<'_>, tick: u64, report: Option<&RecoveryReport>, v: &mut Verdict) {
    let map = trace.initial_image.address_map();
    let mut prov: Vec<Option<TxnId>> = vec![None; map.home_lines as usize];
    for w in trace.pm_writes.iter().take_while(|w| w.tick <= tick) {
        if map.is_home(w.addr) {
            prov[w.addr.0 as usize] = w.provenance;
        }
    }
    if let Some(r) = report {
        for s in &r.replayed {
            if let Some(w) = record_of(trace, s) {
                for (a, _) in w.last_writes() {
                    prov[a.0 as usize] = Some(w.txn);
                }
            }
        }
    }
    let rank = |t: Option<TxnId>| t.and_then(|t| oracle.position(t));
    for (i, w) in oracle.order.iter().enumerate() {
        let lines = &oracle.last[i];
        if !lines.iter().any(|&(l, _)| prov[l] == Some(w.txn)) {
            continue;
        }
        let partial: Vec<usize> = lines
            .iter()
            .filter(|&&(l, _)| rank(prov[l]).is_none_or(|r| r < i))
            .map(|&(l, _)| l)
            .collect();
        if !partial.is_empty() {
            v.push(
                ViolationKind::Atomicity,
                Some(tick),
                vec![w.txn],
                format!("lines {partial:?} missing while other updates are present"),
            );
        }
    }
}

/// The protocol lemmas as predicates over a trace. Vacuous for methods that
/// do not use write-aside logging.
pub fn check_lemmas(trace: &Trace) -> Result<Verdict> {
    let mut v = Verdict::default();
    if !trace.method.uses_wrap() {
        return Ok(v);
    }
    let order = trace.commit_order();
    let preds = prec(&order);
    let map = trace.initial_image.address_map();

    // Every predecessor started before the successor's persist timestamp.
    for (i, x) in order.iter().enumerate() {
        let Some(px) = x.persist_ts else { continue };
        for &j in &preds[i] {
            let y = order[j];
            if !y.start_ts.is_some_and(|sy| sy < px) {
                v.push(
                    ViolationKind::PredecessorStart,
                    None,
                    vec![y.txn, x.txn],
                    format!("start {:?} is not below persist {px}", y.start_ts),
                );
            }
        }
    }

    let home_writes: Vec<_> = trace
        .pm_writes
        .iter()
        .filter(|w| map.is_home(w.addr) && w.provenance.is_some())
        .collect();
    let pos: BTreeMap<TxnId, usize> = order.iter().enumerate().map(|(i, w)| (w.txn, i)).collect();

    for w in &home_writes {
        let txn = w.provenance.expect("filtered");
        let Some(x) = trace.record(txn) else { continue };
        let Some(px) = x.persist_ts else { continue };
        let d = w.tick;

        // Wraps that started before X's persist timestamp have closed
        // and persisted their logs before X's data reaches memory.
        for y in trace.wraps.iter().filter(|y| y.start_ts.is_some_and(|s| s < px)) {
            let closed = y.close_tick.is_some_and(|c| c <= d);
            let logged = y.log_durable_tick.is_some_and(|c| c <= d);
            if !(closed && logged) {
                v.push(
                    ViolationKind::EarlyData,
                    Some(d),
                    vec![x.txn, y.txn],
                    format!("{} written while an earlier-started wrap was unfinished", w.addr),
                );
            }
        }

        // Once any update of X is in memory, X and all of prec(X) have
        // durable logs.
        let mut need: Vec<&WrapRecord> = vec![x];
        if let Some(&i) = pos.get(&txn) {
            need.extend(preds[i].iter().map(|&j| order[j]));
        }
        for y in need {
            let durable = y.log_durable_tick.is_some_and(|c| c <= d)
                || y.cleaned_tick.is_some_and(|c| c <= d);
            if !durable {
                v.push(
                    ViolationKind::UndurableLog,
                    Some(d),
                    vec![x.txn, y.txn],
                    format!("{} written before a required log was durable", w.addr),
                );
            }
        }
    }

    // A wrap with data in memory that has closed is replayed by any
    // later crash until its log is retired.
    let last = trace.last_tick();
    let drain_ticks: BTreeSet<u64> = trace
        .pm_writes
        .iter()
        .filter(|w| w.kind == PmWriteKind::Drain)
        .map(|w| w.tick)
        .collect();
    let mut first_write: BTreeMap<TxnId, u64> = BTreeMap::new();
    for w in &home_writes {
        first_write.entry(w.provenance.expect("filtered")).or_insert(w.tick);
    }
    for (txn, d) in first_write {
        let Some(x) = trace.record(txn) else { continue };
        let Some(close) = x.close_tick else {
            v.push(ViolationKind::NotReplayed, Some(d), vec![txn], "data in memory but wrap never closed".into());
            continue;
        };
        let from = d.max(close);
        let until = x.cleaned_tick.unwrap_or(u64::MAX);
        let mut probes: Vec<u64> = std::iter::once(from)
            .chain(drain_ticks.range(from + 1..).copied().take(POST_DRAIN_PROBES))
            .chain(std::iter::once(last))
            .filter(|&k| k >= from && k < until && k <= last)
            .collect();
        probes.dedup();
        for k in probes {
            let crashed = inject_crash(trace, k)?;
            let replayed = match recover(&crashed.image) {
                Ok(r) => r
                    .replayed
                    .iter()
                    .any(|s| record_of(trace, s).is_some_and(|w| w.txn == txn)),
                Err(_) => false,
            };
            if !replayed {
                v.push(
                    ViolationKind::NotReplayed,
                    Some(k),
                    vec![txn],
                    "closed wrap with data in memory is not replayed".into(),
                );
            }
        }
    }
    Ok(v)
}

/// Crash consistency at every tick of the trace plus the lemma predicates.
pub fn check_all_ticks(trace: &Trace) -> Result<Verdict> {
    let mut v = check_lemmas(trace)?;
    let mut image = trace.initial_image.clone();
    let mut writes = trace.pm_writes.iter().peekable();
    for k in 0..=trace.last_tick() {
        while let Some(w) = writes.next_if(|w| w.tick <= k) {
            image.write(w.addr, w.value);
        }
        v.merge(check_image(trace, k, &image, SCALE_LIMIT)?);
    }
    v.crash_tick = None;
    Ok(v)
}
