//! Embedding-table sharding: assignment of tables to ranks under model
//! parallelism.
//!
//! Two sharders place tables directly by index (naive, random); the rest
//! estimate a per-table cost and assign greedily, largest cost first onto
//! the currently least-loaded rank. [`select_config`] evaluates candidate
//! sharders through a predictor closure (typically: build a synthetic
//! world for the plan and simulate it) and picks the fastest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{EmbeddingTableConfig, ReuseFactorVector};
use crate::par;
use crate::sim::SimError;
use crate::trace::{ExecutionTrace, KernelCall, KernelKind, OpNode, Stream, TensorRef, SCHEMA_VERSION};

/// Fraction of device DRAM the tables on one rank may occupy.
pub const CAPACITY_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum ShardingError {
    #[error("sharder '{0}' places by index and has no cost function")]
    NotCostBased(SharderKind),
    #[error("rank {rank} needs {needed_bytes} bytes of embedding tables, over the {limit_bytes}-byte cap")]
    CapacityExceeded {
        rank: u32,
        needed_bytes: u64,
        limit_bytes: u64,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// The available sharding strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharderKind {
    Naive,
    Random,
    SizeGreedy,
    LookupGreedy,
    NormLookupGreedy,
    SizeLookupGreedy,
}

impl SharderKind {
    pub const ALL: [SharderKind; 6] = [
        SharderKind::Naive,
        SharderKind::Random,
        SharderKind::SizeGreedy,
        SharderKind::LookupGreedy,
        SharderKind::NormLookupGreedy,
        SharderKind::SizeLookupGreedy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SharderKind::Naive => "naive",
            SharderKind::Random => "random",
            SharderKind::SizeGreedy => "size_greedy",
            SharderKind::LookupGreedy => "lookup_greedy",
            SharderKind::NormLookupGreedy => "norm_lookup_greedy",
            SharderKind::SizeLookupGreedy => "size_lookup_greedy",
        }
    }

    pub fn is_cost_based(&self) -> bool {
        !matches!(self, SharderKind::Naive | SharderKind::Random)
    }
}

impl std::fmt::Display for SharderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SharderKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SharderKind::ALL
            .iter()
            .find(|k| k.as_str() == s)
            .copied()
            .ok_or_else(|| format!("unknown sharder '{s}'"))
    }
}

/// A table together with its workload index (used by the indexing sharders).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexedTable {
    pub idx: u64,
    pub config: EmbeddingTableConfig,
}

/// Estimated placement cost of a table under a cost-based sharder.
pub fn table_cost(kind: SharderKind, t: &EmbeddingTableConfig) -> Result<f64, ShardingError> {
    let rows = t.rows as f64;
    let dim = t.dim as f64;
    let pooling = t.avg_pooling;
    match kind {
        SharderKind::SizeGreedy => Ok(rows),
        SharderKind::LookupGreedy => Ok(pooling * dim),
        SharderKind::NormLookupGreedy => Ok(pooling / rows),
        SharderKind::SizeLookupGreedy => Ok(pooling * dim * rows.log10()),
        SharderKind::Naive | SharderKind::Random => Err(ShardingError::NotCostBased(kind)),
    }
}

/// Table-to-rank assignment plus per-rank load summaries. `assignment[i]`
/// is the rank of the i-th input table; `per_rank_cost` is zero for the
/// indexing sharders, which have no cost function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardingPlan {
    pub sharder: SharderKind,
    pub assignment: Vec<u32>,
    pub per_rank_cost: Vec<f64>,
    pub per_rank_bytes: Vec<u64>,
}

impl ShardingPlan {
    /// Tables assigned to `rank`, in input order.
    pub fn tables_of<'a>(&self, tables: &'a [IndexedTable], rank: u32) -> Vec<&'a IndexedTable> {
        tables
            .iter()
            .zip(&self.assignment)
            .filter(|(_, &r)| r == rank)
            .map(|(t, _)| t)
            .collect()
    }
}

/// Assigns tables to `ngpus` ranks with the given sharder. `seed` feeds the
/// random sharder only. When `dram_bytes` is given, every rank's table
/// footprint must stay within [`CAPACITY_FRACTION`] of it.
pub fn shard(
    tables: &[IndexedTable],
    ngpus: u32,
    kind: SharderKind,
    seed: u64,
    dram_bytes: Option<u64>,
) -> Result<ShardingPlan, ShardingError> {
    assert!(ngpus >= 1, "need at least one rank");
    let n = ngpus as usize;
    let mut assignment = vec![0u32; tables.len()];
    let mut per_rank_cost = vec![0.0f64; n];

    match kind {
        SharderKind::Naive => {
            for (i, t) in tables.iter().enumerate() {
                assignment[i] = (t.idx % ngpus as u64) as u32;
            }
        }
        SharderKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for slot in assignment.iter_mut() {
                *slot = rng.random_range(0..ngpus);
            }
        }
        _ => {
            let mut order: Vec<(usize, f64)> = tables
                .iter()
                .enumerate()
                .map(|(i, t)| Ok((i, table_cost(kind, &t.config)?)))
                .collect::<Result<_, ShardingError>>()?;
            // largest first; ties keep input order
            order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (i, cost) in order {
                let rank = least_loaded(&per_rank_cost);
                assignment[i] = rank as u32;
                per_rank_cost[rank] += cost;
            }
        }
    }

    let mut per_rank_bytes = vec![0u64; n];
    for (t, &r) in tables.iter().zip(&assignment) {
        per_rank_bytes[r as usize] += t.config.total_bytes();
    }
    if let Some(dram) = dram_bytes {
        let limit = (dram as f64 * CAPACITY_FRACTION) as u64;
        for (r, &bytes) in per_rank_bytes.iter().enumerate() {
            if bytes > limit {
                return Err(ShardingError::CapacityExceeded {
                    rank: r as u32,
                    needed_bytes: bytes,
                    limit_bytes: limit,
                });
            }
        }
    }

    Ok(ShardingPlan {
        sharder: kind,
        assignment,
        per_rank_cost,
        per_rank_bytes,
    })
}

fn least_loaded(loads: &[f64]) -> usize {
    let mut best = 0;
    for (r, &load) in loads.iter().enumerate().skip(1) {
        if load < loads[best] {
            best = r;
        }
    }
    best
}

/// Knobs for the synthetic DLRM-style world built per sharding plan.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionWorldSpec {
    pub batch_size: u32,
    /// Reuse factors attached to every rank's embedding kernels.
    pub rf: ReuseFactorVector,
    /// Dense-gradient all-reduce size, bytes.
    pub allreduce_bytes: u64,
    /// Latency of the interaction/MLP stage modeled as fixed kernels, µs.
    pub dense_us: f64,
}

impl Default for SelectionWorldSpec {
    fn default() -> Self {
        Self {
            batch_size: 4096,
            rf: ReuseFactorVector::zero(),
            allreduce_bytes: 25 << 20,
            dense_us: 500.0,
        }
    }
}

/// Builds the per-rank traces of one training iteration under a plan:
/// embedding forward, an all-to-all exchanging pooled embeddings (each rank
/// sends `batch * sum(dim) * 4` bytes to every peer), the dense stage, the
/// gradient all-to-all flowing back, embedding backward, and the dense
/// all-reduce.
pub fn build_selection_world(
    tables: &[IndexedTable],
    plan: &ShardingPlan,
    spec: &SelectionWorldSpec,
) -> Vec<ExecutionTrace> {
    let ranks = plan.per_rank_bytes.len() as u32;
    let fwd_bytes: Vec<u64> = (0..ranks)
        .map(|r| {
            let dims: u64 = plan
                .tables_of(tables, r)
                .iter()
                .map(|t| t.config.dim as u64)
                .sum();
            spec.batch_size as u64 * dims * 4
        })
        .collect();
    let n = ranks as usize;
    let mut fwd_matrix = vec![vec![0u64; n]; n];
    let mut bwd_matrix = vec![vec![0u64; n]; n];
    for src in 0..n {
        for dst in 0..n {
            if src != dst {
                fwd_matrix[src][dst] = fwd_bytes[src];
                bwd_matrix[dst][src] = fwd_bytes[src];
            }
        }
    }

    (0..ranks)
        .map(|rank| {
            let local: Vec<EmbeddingTableConfig> = plan
                .tables_of(tables, rank)
                .iter()
                .map(|t| t.config)
                .collect();
            let mut ops = Vec::new();
            let tensors: Vec<TensorRef> =
                (0..6).map(|id| TensorRef { id, bytes: fwd_bytes[rank as usize].max(1) }).collect();
            let mut push = |name: &str, inputs: Vec<u64>, outputs: Vec<u64>, seq, kernel| {
                let id = ops.len() as u64;
                let stream = match &kernel {
                    KernelKind::AllToAll { .. } | KernelKind::AllReduce { .. } => {
                        Stream::Communication
                    }
                    _ => Stream::Compute,
                };
                ops.push(OpNode {
                    id,
                    name: name.into(),
                    inputs,
                    outputs,
                    stream,
                    collective_seq: seq,
                    kernels: vec![KernelCall::new(kernel)],
                });
            };

            push(
                "embedding_fwd",
                vec![],
                vec![0],
                None,
                KernelKind::EmbeddingFwd {
                    tables: local.clone(),
                    batch_size: spec.batch_size,
                    rf: spec.rf,
                },
            );
            push(
                "nccl:all_to_all",
                vec![0],
                vec![1],
                Some(0),
                KernelKind::AllToAll { send_bytes: fwd_matrix.clone() },
            );
            push(
                "aten::addmm",
                vec![1],
                vec![2],
                None,
                KernelKind::Fixed { latency_us: spec.dense_us },
            );
            push(
                "aten::addmm_backward",
                vec![2],
                vec![3],
                None,
                KernelKind::Fixed { latency_us: spec.dense_us },
            );
            push(
                "nccl:all_to_all",
                vec![3],
                vec![4],
                Some(1),
                KernelKind::AllToAll { send_bytes: bwd_matrix.clone() },
            );
            push(
                "embedding_bwd",
                vec![4],
                vec![5],
                None,
                KernelKind::EmbeddingBwd {
                    tables: local,
                    batch_size: spec.batch_size,
                    rf: spec.rf,
                },
            );
            push(
                "nccl:all_reduce",
                vec![],
                vec![],
                Some(2),
                KernelKind::AllReduce { bytes: spec.allreduce_bytes },
            );

            ExecutionTrace {
                schema_version: SCHEMA_VERSION,
                rank,
                world_size: ranks,
                tensors,
                ops,
            }
        })
        .collect()
}

/// Outcome of candidate evaluation: the fastest sharder and every
/// candidate's predicted time, in candidate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub fastest: SharderKind,
    pub predicted_us: Vec<(SharderKind, f64)>,
}

/// Plans each candidate sharder, prices it with the predictor, and returns
/// the argmin. Ties break toward the earlier candidate. Candidates may be
/// evaluated concurrently; the outcome is merged in candidate order.
pub fn select_config<F>(
    tables: &[IndexedTable],
    ngpus: u32,
    candidates: &[SharderKind],
    seed: u64,
    predictor: F,
) -> Result<SelectionOutcome, ShardingError>
where
    F: Fn(&ShardingPlan) -> Result<f64, SimError> + Sync,
{
    assert!(!candidates.is_empty(), "need at least one candidate");
    let predicted: Vec<(SharderKind, f64)> = par::try_map_slice(candidates, |&kind| {
        let plan = shard(tables, ngpus, kind, seed, None)
            .expect("planning without a capacity check cannot fail");
        Ok((kind, predictor(&plan)?))
    })
    .map_err(ShardingError::Sim)?;

    let mut fastest = predicted[0];
    for &(kind, us) in &predicted[1..] {
        if us < fastest.1 {
            fastest = (kind, us);
        }
    }
    Ok(SelectionOutcome {
        fastest: fastest.0,
        predicted_us: predicted,
    })
}
