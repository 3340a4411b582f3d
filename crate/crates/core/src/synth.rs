//! Synthetic world generation for testing and benchmarking.
//!
//! [`synth_trace`] produces randomized but internally consistent per-rank
//! traces: the collective schedule (count, kinds, payloads) is shared
//! across ranks while op placement, kernel times, and dependencies vary per
//! rank, so both synchronization paths of the simulator get exercised.
//! Generation is a pure function of `(spec, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::comm::CollectiveKind;
use crate::trace::{ExecutionTrace, KernelCall, KernelKind, OpNode, Stream, TensorRef, SCHEMA_VERSION};

/// Generator configuration for [`synth_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub ranks: u32,
    pub ops_per_rank: u32,
    /// Fraction of ops that are communication collectives.
    pub comm_density: f64,
    /// Latency range for fixed compute kernels, µs.
    pub fixed_us: (f64, f64),
    /// Per-device message size range for collectives, bytes.
    pub collective_bytes: (u64, u64),
    /// Chance that a compute op consumes the latest collective's output.
    pub dependent_prob: f64,
    /// Compute ops carry 1..=this many kernels.
    pub max_kernels_per_op: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            ranks: 2,
            ops_per_rank: 50,
            comm_density: 0.2,
            fixed_us: (1.0, 50.0),
            collective_bytes: (256, 1 << 20),
            dependent_prob: 0.7,
            max_kernels_per_op: 3,
        }
    }
}

const COMPUTE_OP_NAMES: &[&str] = &[
    "aten::addmm",
    "aten::bmm",
    "aten::relu",
    "aten::copy_",
    "aten::cat",
    "aten::transpose",
    "aten::layer_norm",
    "aten::dropout",
    "aten::gelu",
];

/// Generates one trace per rank. The output always passes
/// [`crate::trace::validate_world`] and is byte-identical for the same
/// `(spec, seed)`.
pub fn synth_trace(spec: &SynthSpec, seed: u64) -> Vec<ExecutionTrace> {
    assert!(spec.ranks >= 1, "need at least one rank");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_comm = ((spec.ops_per_rank as f64 * spec.comm_density).round() as u32)
        .min(spec.ops_per_rank);

    // Shared collective schedule: kinds and payloads are one logical
    // operation per seq, identical on every rank.
    let kinds: Vec<CollectiveKind> = (0..n_comm)
        .map(|_| {
            if rng.random_bool(0.5) {
                CollectiveKind::AllToAll
            } else {
                CollectiveKind::AllReduce
            }
        })
        .collect();
    let payloads: Vec<KernelKind> = kinds
        .iter()
        .map(|kind| match kind {
            CollectiveKind::AllToAll => {
                let n = spec.ranks as usize;
                let send_bytes = (0..n)
                    .map(|_| {
                        (0..n)
                            .map(|_| rng.random_range(spec.collective_bytes.0..=spec.collective_bytes.1))
                            .collect()
                    })
                    .collect();
                KernelKind::AllToAll { send_bytes }
            }
            CollectiveKind::AllReduce => KernelKind::AllReduce {
                bytes: rng.random_range(spec.collective_bytes.0..=spec.collective_bytes.1),
            },
        })
        .collect();

    (0..spec.ranks)
        .map(|rank| synth_rank(spec, rank, &kinds, &payloads, &mut rng))
        .collect()
}

fn synth_rank(
    spec: &SynthSpec,
    rank: u32,
    kinds: &[CollectiveKind],
    payloads: &[KernelKind],
    rng: &mut ChaCha8Rng,
) -> ExecutionTrace {
    let total = spec.ops_per_rank as usize;
    let n_comm = kinds.len();

    // rank-specific comm positions: sample distinct slots, sorted
    let mut slots: Vec<usize> = (0..total).collect();
    for i in 0..n_comm.min(total) {
        let j = rng.random_range(i..total);
        slots.swap(i, j);
    }
    let mut comm_at = vec![usize::MAX; total];
    let mut chosen: Vec<usize> = slots[..n_comm].to_vec();
    chosen.sort_unstable();
    for (seq, &pos) in chosen.iter().enumerate() {
        comm_at[pos] = seq;
    }

    let mut tensors = Vec::new();
    let mut next_tensor = 0u64;
    let fresh = |bytes: u64, tensors: &mut Vec<TensorRef>, next: &mut u64| {
        let id = *next;
        *next += 1;
        tensors.push(TensorRef { id, bytes });
        id
    };

    let mut ops = Vec::with_capacity(total);
    let mut pending_comm_output: Option<u64> = None;
    let mut last_output: Option<u64> = None;

    for (pos, &seq) in comm_at.iter().enumerate() {
        if seq != usize::MAX {
            let kind = payloads[seq].clone();
            let name = format!("nccl:{}", kinds[seq].as_str());
            let inputs = last_output.into_iter().collect();
            let out = fresh(
                rng.random_range(spec.collective_bytes.0..=spec.collective_bytes.1),
                &mut tensors,
                &mut next_tensor,
            );
            ops.push(OpNode {
                id: pos as u64,
                name,
                inputs,
                outputs: vec![out],
                stream: Stream::Communication,
                collective_seq: Some(seq as u32),
                kernels: vec![KernelCall::new(kind)],
            });
            pending_comm_output = Some(out);
            last_output = Some(out);
        } else {
            let name = COMPUTE_OP_NAMES[rng.random_range(0..COMPUTE_OP_NAMES.len())].to_string();
            let mut inputs = Vec::new();
            if let Some(dep) = pending_comm_output {
                if rng.random_bool(spec.dependent_prob) {
                    inputs.push(dep);
                    pending_comm_output = None;
                }
            }
            let n_kernels = rng.random_range(1..=spec.max_kernels_per_op.max(1));
            let kernels = (0..n_kernels)
                .map(|_| {
                    KernelCall::new(KernelKind::Fixed {
                        latency_us: rng.random_range(spec.fixed_us.0..=spec.fixed_us.1),
                    })
                })
                .collect();
            let out = fresh(rng.random_range(64..=4096), &mut tensors, &mut next_tensor);
            ops.push(OpNode {
                id: pos as u64,
                name,
                inputs,
                outputs: vec![out],
                stream: Stream::Compute,
                collective_seq: None,
                kernels,
            });
            last_output = Some(out);
        }
    }

    ExecutionTrace {
        schema_version: SCHEMA_VERSION,
        rank,
        world_size: spec.ranks,
        tensors,
        ops,
    }
}

/// A deterministic communication-dominated, rank-imbalanced world: each
/// round one rank runs a long compute kernel while the others run short
/// ones, then all ranks join an all-reduce whose output feeds the next
/// round's compute op. The heavy role rotates across ranks, so per-rank
/// kernel sums stay far below the serialized critical path.
pub fn comm_heavy_world(
    ranks: u32,
    rounds: u32,
    heavy_us: f64,
    light_us: f64,
    collective_bytes: u64,
) -> Vec<ExecutionTrace> {
    (0..ranks)
        .map(|rank| {
            let mut tensors = Vec::new();
            let mut ops = Vec::new();
            let mut next_id = 0u64;
            let mut prev_comm_out: Option<u64> = None;
            for round in 0..rounds {
                let compute_out = next_id;
                tensors.push(TensorRef { id: compute_out, bytes: 1024 });
                next_id += 1;
                let latency_us = if round % ranks == rank { heavy_us } else { light_us };
                ops.push(OpNode {
                    id: (2 * round) as u64,
                    name: "aten::addmm".into(),
                    inputs: prev_comm_out.into_iter().collect(),
                    outputs: vec![compute_out],
                    stream: Stream::Compute,
                    collective_seq: None,
                    kernels: vec![KernelCall::new(KernelKind::Fixed { latency_us })],
                });

                let comm_out = next_id;
                tensors.push(TensorRef { id: comm_out, bytes: collective_bytes });
                next_id += 1;
                ops.push(OpNode {
                    id: (2 * round + 1) as u64,
                    name: "nccl:all_reduce".into(),
                    inputs: vec![compute_out],
                    outputs: vec![comm_out],
                    stream: Stream::Communication,
                    collective_seq: Some(round),
                    kernels: vec![KernelCall::new(KernelKind::AllReduce { bytes: collective_bytes })],
                });
                prev_comm_out = Some(comm_out);
            }
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
