//! Multi-rank critical-path simulation of execution traces.
//!
//! Each rank carries a CPU time front and two GPU stream fronts (compute
//! and communication). Ops are traversed in trace order; per-op CPU
//! overheads advance the CPU front, kernels advance their stream front by
//!
//! ```text
//! T_s = max(T_s + kernel_gap, cpu_time + launch_overhead / 2) + T_k
//! ```
//!
//! Two synchronization rules couple the fronts. Intra-rank: an op that
//! consumes the last collective's output, or is itself a collective, pulls
//! both stream fronts up to their maximum before it runs. Inter-rank: when
//! a collective's kernels finish, every rank's communication front is set
//! to the maximum across ranks at that collective position — collectives
//! terminate together.
//!
//! All ranks advance independently between collectives and exchange their
//! communication fronts at each one; the traversal is single-threaded and
//! deterministic. [`oracle::oracle_simulate`] re-implements the same timing
//! rules as an event-queue over per-rank actors and must agree exactly;
//! [`baseline_predict`] is the synchronization-free lower bound.

pub mod oracle;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{KernelError, LatencyModel};
use crate::trace::{depends_on, ExecutionTrace, KernelKind, OpNode, Stream, WorldError};

pub use oracle::oracle_simulate;

/// Minimum gap between consecutive kernels on one stream, µs.
pub const KERNEL_GAP_US: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    World(#[from] WorldError),
}

/// Per-op CPU overheads, µs. The five fields are the op-call overhead, the
/// gap before the first kernel launch, the gap after the last kernel, the
/// per-kernel launch overhead, and the inter-kernel (or kernel-less op)
/// gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpOverheads {
    #[serde(rename = "T1")]
    pub op_call_us: f64,
    #[serde(rename = "T2")]
    pub pre_kernel_us: f64,
    #[serde(rename = "T3")]
    pub post_kernel_us: f64,
    #[serde(rename = "T4")]
    pub launch_us: f64,
    #[serde(rename = "T5")]
    pub gap_us: f64,
}

impl OpOverheads {
    pub fn zero() -> Self {
        Self {
            op_call_us: 0.0,
            pre_kernel_us: 0.0,
            post_kernel_us: 0.0,
            launch_us: 0.0,
            gap_us: 0.0,
        }
    }
}

/// Mean CPU overheads per op name, with a default record for ops that were
/// never profiled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadStats {
    pub default: OpOverheads,
    #[serde(default)]
    pub ops: BTreeMap<String, OpOverheads>,
}

impl OverheadStats {
    pub fn zero() -> Self {
        Self {
            default: OpOverheads::zero(),
            ops: BTreeMap::new(),
        }
    }

    pub fn for_op(&self, name: &str) -> &OpOverheads {
        self.ops.get(name).unwrap_or(&self.default)
    }
}

/// Kernel time attribution category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Embedding,
    Gemm,
    Memory,
    Comm,
    Other,
    Idle,
}

const ACTIVE_CATEGORIES: [Category; 5] = [
    Category::Embedding,
    Category::Gemm,
    Category::Memory,
    Category::Comm,
    Category::Other,
];

fn categorize(op_name: &str, kind: &KernelKind) -> Category {
    match kind {
        KernelKind::AllToAll { .. } | KernelKind::AllReduce { .. } => Category::Comm,
        KernelKind::EmbeddingFwd { .. } | KernelKind::EmbeddingBwd { .. } => Category::Embedding,
        _ => {
            let n = op_name.to_ascii_lowercase();
            if ["gemm", "matmul", "addmm", "bmm", "linear"].iter().any(|p| n.contains(p)) {
                Category::Gemm
            } else if ["memcpy", "copy", "cat", "transpose", "contiguous", "split"]
                .iter()
                .any(|p| n.contains(p))
            {
                Category::Memory
            } else {
                Category::Other
            }
        }
    }
}

/// Final time fronts of one rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankTiming {
    pub cpu_time_us: f64,
    pub compute_front_us: f64,
    pub comm_front_us: f64,
    pub gpu_active_us: f64,
}

/// Per-stream kernel-time attribution, including idle time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankBreakdown {
    pub compute: BTreeMap<Category, f64>,
    pub communication: BTreeMap<Category, f64>,
}

/// Simulation output: the predicted per-iteration time, the maximum
/// accumulated kernel active time, and per-rank details.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub total_us: f64,
    pub gpu_active_us: f64,
    pub per_rank: Vec<RankTiming>,
    pub breakdown: Vec<RankBreakdown>,
}

impl PredictionReport {
    /// Human-readable per-stream table of breakdown percentages.
    pub fn breakdown_table(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<13} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
            "rank", "stream", "total_us", "embed%", "gemm%", "mem%", "comm%", "other%", "idle%"
        );
        for (rank, b) in self.breakdown.iter().enumerate() {
            for (label, map) in [("compute", &b.compute), ("communication", &b.communication)] {
                let total: f64 = map.values().sum();
                let pct = |c: Category| {
                    if total > 0.0 {
                        100.0 * map.get(&c).copied().unwrap_or(0.0) / total
                    } else {
                        0.0
                    }
                };
                let _ = writeln!(
                    out,
                    "{:<10} {:<13} {:>10.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1} {:>8.1}",
                    rank,
                    label,
                    total,
                    pct(Category::Embedding),
                    pct(Category::Gemm),
                    pct(Category::Memory),
                    pct(Category::Comm),
                    pct(Category::Other),
                    pct(Category::Idle),
                );
            }
        }
        out
    }
}

/// Communication-front exchange at one collective: per-rank arrival values
/// and the agreed front.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveSyncPoint {
    pub seq: u32,
    pub arrivals_us: Vec<f64>,
    pub synced_us: f64,
}

struct PendingCollective {
    seq: u32,
    kind: &'static str,
    arrival_us: f64,
}

struct RankRun<'a, M: LatencyModel + ?Sized> {
    trace: &'a ExecutionTrace,
    overheads: &'a OverheadStats,
    model: &'a M,
    pos: usize,
    cpu_us: f64,
    compute_front: f64,
    comm_front: f64,
    gpu_active: f64,
    last_comm: Option<usize>,
    pending_post_us: f64,
    active: [[f64; 5]; 2], // [stream][active category]
}

impl<'a, M: LatencyModel + ?Sized> RankRun<'a, M> {
    fn new(trace: &'a ExecutionTrace, model: &'a M, overheads: &'a OverheadStats) -> Self {
        Self {
            trace,
            overheads,
            model,
            pos: 0,
            cpu_us: 0.0,
            compute_front: 0.0,
            comm_front: 0.0,
            gpu_active: 0.0,
            last_comm: None,
            pending_post_us: 0.0,
            active: [[0.0; 5]; 2],
        }
    }

    /// Runs ops in order until the kernels of the next collective have been
    /// placed, pausing before its communication-front exchange. Returns
    /// `None` when the trace is exhausted.
    fn advance(&mut self) -> Result<Option<PendingCollective>, SimError> {
        while self.pos < self.trace.ops.len() {
            let op = &self.trace.ops[self.pos];
            let ov = *self.overheads.for_op(&op.name);
            let is_comm = op.is_comm();

            let depends_on_comm = self
                .last_comm
                .map(|i| depends_on(op, &self.trace.ops[i]))
                .unwrap_or(false);
            if depends_on_comm || is_comm {
                self.last_comm = None;
                let front = f64::max(self.comm_front, self.compute_front);
                self.comm_front = front;
                self.compute_front = front;
            }

            self.cpu_us += ov.op_call_us;
            if !op.kernels.is_empty() {
                self.cpu_us += ov.pre_kernel_us;
                for (ki, kernel) in op.kernels.iter().enumerate() {
                    let kernel_us = self.model.kernel_latency(kernel)?;
                    let front = match op.stream {
                        Stream::Compute => &mut self.compute_front,
                        Stream::Communication => &mut self.comm_front,
                    };
                    *front = f64::max(*front + KERNEL_GAP_US, self.cpu_us + ov.launch_us / 2.0)
                        + kernel_us;
                    self.gpu_active += kernel_us;
                    let stream_ix = match op.stream {
                        Stream::Compute => 0,
                        Stream::Communication => 1,
                    };
                    let cat = ACTIVE_CATEGORIES
                        .iter()
                        .position(|&c| c == categorize(&op.name, &kernel.kind))
                        .expect("active category");
                    self.active[stream_ix][cat] += kernel_us;
                    self.cpu_us += ov.launch_us;
                    if ki + 1 < op.kernels.len() {
                        self.cpu_us += ov.gap_us;
                    }
                }
                if is_comm {
                    self.pending_post_us = ov.post_kernel_us;
                    return Ok(Some(PendingCollective {
                        seq: op.collective_seq.expect("comm op has a seq"),
                        kind: collective_kind_name(op),
                        arrival_us: self.comm_front,
                    }));
                }
                self.cpu_us += ov.post_kernel_us;
            } else {
                self.cpu_us += ov.gap_us;
            }
            self.pos += 1;
        }
        Ok(None)
    }

    /// Applies the exchanged communication front and finishes the paused
    /// collective op.
    fn resume(&mut self, synced_us: f64) {
        self.comm_front = synced_us;
        self.cpu_us += self.pending_post_us;
        self.pending_post_us = 0.0;
        self.last_comm = Some(self.pos);
        self.pos += 1;
    }

    fn finish(self) -> (RankTiming, RankBreakdown) {
        let timing = RankTiming {
            cpu_time_us: self.cpu_us,
            compute_front_us: self.compute_front,
            comm_front_us: self.comm_front,
            gpu_active_us: self.gpu_active,
        };
        let stream_map = |ix: usize, front: f64| {
            let mut map = BTreeMap::new();
            let mut sum = 0.0;
            for (c, cat) in ACTIVE_CATEGORIES.iter().enumerate() {
                map.insert(*cat, self.active[ix][c]);
                sum += self.active[ix][c];
            }
            let idle = front - sum;
            debug_assert!(idle >= 0.0, "negative idle {idle}");
            map.insert(Category::Idle, idle);
            map
        };
        let breakdown = RankBreakdown {
            compute: stream_map(0, self.compute_front),
            communication: stream_map(1, self.comm_front),
        };
        (timing, breakdown)
    }
}

fn collective_kind_name(op: &OpNode) -> &'static str {
    op.kernels
        .iter()
        .find_map(|k| match k.kind {
            KernelKind::AllToAll { .. } => Some("all_to_all"),
            KernelKind::AllReduce { .. } => Some("all_reduce"),
            _ => None,
        })
        .expect("comm op has a collective kernel")
}

fn ranks_in_order(traces: &[ExecutionTrace]) -> Result<Vec<&ExecutionTrace>, WorldError> {
    let mut by_rank: Vec<Option<&ExecutionTrace>> = vec![None; traces.len()];
    for t in traces {
        let slot = by_rank
            .get_mut(t.rank as usize)
            .ok_or_else(|| WorldError::WorldMismatch(format!("rank {} out of range", t.rank)))?;
        if slot.is_some() {
            return Err(WorldError::WorldMismatch(format!("duplicate rank {}", t.rank)));
        }
        *slot = Some(t);
    }
    Ok(by_rank.into_iter().map(|s| s.expect("all ranks present")).collect())
}

/// Runs the critical-path traversal and returns the report together with
/// the per-collective communication-front exchanges.
pub fn simulate_detailed<M: LatencyModel + ?Sized>(
    traces: &[ExecutionTrace],
    model: &M,
    overheads: &OverheadStats,
) -> Result<(PredictionReport, Vec<CollectiveSyncPoint>), SimError> {
    let ordered = ranks_in_order(traces)?;
    let mut runs: Vec<RankRun<M>> = ordered
        .iter()
        .map(|t| RankRun::new(t, model, overheads))
        .collect();

    let mut sync_points = Vec::new();
    loop {
        let mut pendings = Vec::with_capacity(runs.len());
        for run in &mut runs {
            pendings.push(run.advance()?);
        }
        let arrived = pendings.iter().flatten().count();
        if arrived == 0 {
            break;
        }
        if arrived != runs.len() {
            return Err(WorldError::CollectiveMismatch(
                "some ranks finished while others wait at a collective".into(),
            )
            .into());
        }
        let first = pendings[0].as_ref().expect("checked non-empty");
        let (seq, kind) = (first.seq, first.kind);
        for p in pendings.iter().flatten() {
            if p.seq != seq || p.kind != kind {
                return Err(WorldError::CollectiveMismatch(format!(
                    "ranks disagree at a collective: ({seq}, {kind}) vs ({}, {})",
                    p.seq, p.kind
                ))
                .into());
            }
        }
        let arrivals: Vec<f64> = pendings.iter().flatten().map(|p| p.arrival_us).collect();
        let synced = arrivals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        sync_points.push(CollectiveSyncPoint {
            seq,
            arrivals_us: arrivals,
            synced_us: synced,
        });
        for run in &mut runs {
            run.resume(synced);
        }
    }

    let mut per_rank = Vec::with_capacity(runs.len());
    let mut breakdown = Vec::with_capacity(runs.len());
    for run in runs {
        let (t, b) = run.finish();
        per_rank.push(t);
        breakdown.push(b);
    }
    let total_us = per_rank
        .iter()
        .map(|r| f64::max(r.comm_front_us, f64::max(r.compute_front_us, r.cpu_time_us)))
        .fold(0.0, f64::max);
    let gpu_active_us = per_rank.iter().map(|r| r.gpu_active_us).fold(0.0, f64::max);

    Ok((
        PredictionReport {
            total_us,
            gpu_active_us,
            per_rank,
            breakdown,
        },
        sync_points,
    ))
}

/// Predicts the per-iteration training time of a validated world.
pub fn simulate<M: LatencyModel + ?Sized>(
    traces: &[ExecutionTrace],
    model: &M,
    overheads: &OverheadStats,
) -> Result<PredictionReport, SimError> {
    simulate_detailed(traces, model, overheads).map(|(report, _)| report)
}

/// The synchronization-free baseline: the maximum over ranks and streams of
/// summed kernel time. No overheads, no gaps, no waiting.
pub fn baseline_predict<M: LatencyModel + ?Sized>(
    traces: &[ExecutionTrace],
    model: &M,
) -> Result<f64, SimError> {
    let mut best = 0.0f64;
    for trace in traces {
        let mut sums = [0.0f64; 2];
        for op in &trace.ops {
            let ix = match op.stream {
                Stream::Compute => 0,
                Stream::Communication => 1,
            };
            for kernel in &op.kernels {
                sums[ix] += model.kernel_latency(kernel)?;
            }
        }
        best = best.max(sums[0]).max(sums[1]);
    }
    Ok(best)
}
