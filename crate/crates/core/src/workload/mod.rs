//! Workload generators, run metrics and CSV output.

pub mod gen;
pub mod scripted;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::LineValue;
use crate::engine::{run, Method, Schedule, SimConfig, Trace, Workload};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkloadKind {
    CounterVector,
    Hashtable,
    Rbtree,
    /// Transactions A, B, C, one per thread.
    Scripted,
}

impl WorkloadKind {
    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::CounterVector => "counter",
            WorkloadKind::Hashtable => "hashtable",
            WorkloadKind::Rbtree => "rbtree",
            WorkloadKind::Scripted => "scripted",
        }
    }
}

impl std::str::FromStr for WorkloadKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "counter" | "counter_vector" => Ok(WorkloadKind::CounterVector),
            "hash" | "hashtable" => Ok(WorkloadKind::Hashtable),
            "rbtree" => Ok(WorkloadKind::Rbtree),
            "scripted" | "abc" => Ok(WorkloadKind::Scripted),
            other => Err(format!("unknown workload `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub threads: usize,
    pub tx_count: usize,
    pub writes_per_tx: usize,
    /// Fraction of accesses that are pure reads.
    pub read_write_ratio: f64,
    /// Table size; for the tree, the number of seeded elements.
    pub table_lines: u64,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            kind: WorkloadKind::Hashtable,
            threads: 4,
            tx_count: 1000,
            writes_per_tx: 10,
            read_write_ratio: 0.0,
            table_lines: 1 << 12,
            seed: 1,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.threads == 0 {
            return bad("threads must be at least 1");
        }
        if !(0.0..1.0).contains(&self.read_write_ratio) {
            return bad("read/write ratio must lie in [0, 1)");
        }
        match self.kind {
            WorkloadKind::CounterVector | WorkloadKind::Hashtable if self.table_lines < 2 => {
                bad("table needs at least two lines")
            }
            WorkloadKind::Hashtable if self.writes_per_tx as u64 > self.table_lines / 2 => {
                bad("hash table too small for the write set")
            }
            _ => Ok(()),
        }
    }

    /// The workload and the home-region size it needs.
    pub fn build(&self) -> Result<(Workload, u64)> {
        self.validate()?;
        Ok(match self.kind {
            WorkloadKind::CounterVector => (gen::counter_vector(self), self.table_lines),
            WorkloadKind::Hashtable => (gen::hashtable(self), self.table_lines),
            WorkloadKind::Rbtree => gen::rbtree(self),
            WorkloadKind::Scripted => (scripted::abc_concurrent(), 4),
        })
    }

    /// Order-independent view of a home image: what every method must agree
    /// on after a crash-free run.
    pub fn logical_state(&self, home: &[LineValue]) -> Vec<u64> {
        match self.kind {
            WorkloadKind::CounterVector | WorkloadKind::Scripted => home.to_vec(),
            WorkloadKind::Hashtable => gen::hashtable_contents(home, self.table_lines)
                .into_iter()
                .flat_map(|(k, c)| [k, c])
                .collect(),
            WorkloadKind::Rbtree => gen::rbtree_keys(home),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyHistogram {
    /// `buckets[i]` counts latencies in `[2^i, 2^(i+1))`.
    pub buckets: Vec<u64>,
    pub mean: f64,
    pub p50: u64,
    pub p99: u64,
}

impl LatencyHistogram {
    pub fn from_samples(mut samples: Vec<u64>) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_unstable();
        let mut buckets = vec![0; 64];
        for &s in &samples {
            buckets[63 - s.max(1).leading_zeros() as usize] += 1;
        }
        while buckets.last() == Some(&0) {
            buckets.pop();
        }
        let pct = |p: f64| samples[((samples.len() - 1) as f64 * p).round() as usize];
        Self {
            mean: samples.iter().sum::<u64>() as f64 / samples.len() as f64,
            p50: pct(0.5),
            p99: pct(0.99),
            buckets,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub workload: WorkloadKind,
    pub threads: usize,
    pub pm_write_cost: u64,
    pub writes_per_tx: usize,
    pub tx_count: usize,
    /// Simulated makespan in cycles.
    pub sim_ticks: u64,
    pub committed_tx: usize,
    pub aborts: u64,
    pub max_vdb_depth: usize,
    pub max_dwq_depth: usize,
    pub latency: LatencyHistogram,
}

impl RunMetrics {
    /// Committed transactions per million simulated cycles.
    pub fn throughput(&self) -> f64 {
        if self.sim_ticks == 0 {
            return 0.0;
        }
        self.committed_tx as f64 * 1e6 / self.sim_ticks as f64
    }

    pub fn from_trace(spec: &WorkloadSpec, config: &SimConfig, trace: &Trace) -> Self {
        let latencies = trace.committed().filter_map(|w| w.latency).collect();
        Self {
            method: config.method,
            workload: spec.kind,
            threads: spec.threads,
            pm_write_cost: config.latency.pm_write_multiplier,
            writes_per_tx: spec.writes_per_tx,
            tx_count: spec.tx_count,
            sim_ticks: trace.makespan(),
            committed_tx: trace.committed_count(),
            aborts: trace.wraps.iter().map(|w| w.aborts as u64).sum(),
            max_vdb_depth: trace.max_vdb_depth,
            max_dwq_depth: trace.max_dwq_depth,
            latency: LatencyHistogram::from_samples(latencies),
        }
    }
}

/// Builds and runs a workload under `config` (its home size is replaced by
/// what the workload needs).
pub fn run_workload(spec: &WorkloadSpec, schedule: &Schedule, config: &SimConfig) -> Result<(RunMetrics, Trace)> {
    let (workload, lines) = spec.build()?;
    let cfg = SimConfig {
        home_lines: lines,
        ..config.clone()
    };
    let trace = run(&workload, &cfg, schedule)?;
    Ok((RunMetrics::from_trace(spec, &cfg, &trace), trace))
}

pub const CSV_COLUMNS: [&str; 15] = [
    "method",
    "workload",
    "threads",
    "pm_write_cost",
    "writes_per_tx",
    "tx",
    "sim_ticks",
    "committed_tx",
    "aborts",
    "max_vdb_depth",
    "max_dwq_depth",
    "mean_latency",
    "p50_latency",
    "p99_latency",
    "throughput",
];

/// One header row, then one row per run, columns as in [`CSV_COLUMNS`].
pub fn emit_csv<W: Write>(rows: &[RunMetrics], mut out: W) -> Result<()> {
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    for m in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{:.2},{},{},{:.3}",
            m.method.name(),
            m.workload.name(),
            m.threads,
            m.pm_write_cost,
            m.writes_per_tx,
            m.tx_count,
            m.sim_ticks,
            m.committed_tx,
            m.aborts,
            m.max_vdb_depth,
            m.max_dwq_depth,
            m.latency.mean,
            m.latency.p50,
            m.latency.p99,
            m.throughput(),
        )?;
    }
    Ok(())
}
