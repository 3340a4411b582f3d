//! Per-rank execution-trace data model.
//!
//! A trace is a topologically ordered list of ops, each carrying zero or
//! more kernel calls on one of two GPU streams (compute or communication),
//! plus a tensor table that encodes data dependencies between ops. One trace
//! file per rank; a world is the set of traces for ranks `0..N`.
//!
//! Traces are immutable after parsing and may be shared across threads
//! freely. Parsing rejects malformed input instead of repairing it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{EmbeddingTableConfig, ReuseFactorVector};

/// Current trace file schema version.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("op {op_id} references tensor {tensor_id} absent from the tensor table")]
    DanglingTensor { op_id: u64, tensor_id: u64 },
    #[error("order error: {0}")]
    Order(String),
}

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("world mismatch: {0}")]
    WorldMismatch(String),
    #[error("collective mismatch: {0}")]
    CollectiveMismatch(String),
}

/// GPU stream a kernel executes on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Compute,
    Communication,
}

/// A tensor identity and its size in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRef {
    pub id: u64,
    pub bytes: u64,
}

/// Kernel descriptor with its kind-specific payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "args", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelKind {
    /// Personalized exchange; `send_bytes[src][dst]` is the byte count
    /// device `src` sends to device `dst`.
    AllToAll { send_bytes: Vec<Vec<u64>> },
    /// Reduction with equal per-device message size.
    AllReduce { bytes: u64 },
    /// Embedding-table lookup forward pass over a batch.
    EmbeddingFwd {
        tables: Vec<EmbeddingTableConfig>,
        batch_size: u32,
        rf: ReuseFactorVector,
    },
    /// Embedding-table lookup backward pass over a batch.
    EmbeddingBwd {
        tables: Vec<EmbeddingTableConfig>,
        batch_size: u32,
        rf: ReuseFactorVector,
    },
    /// Elementwise op characterized by its total work.
    Roofline { flops: f64, bytes: f64 },
    /// Op predicted by a named learned model over a feature vector.
    Learned { model: String, features: Vec<f64> },
    /// Kernel with a known constant latency.
    Fixed { latency_us: f64 },
}

impl KernelKind {
    /// True for communication collectives.
    pub fn is_collective(&self) -> bool {
        matches!(self, KernelKind::AllToAll { .. } | KernelKind::AllReduce { .. })
    }

    /// Stream this kind executes on: collectives on the communication
    /// stream, everything else on the compute stream.
    pub fn stream(&self) -> Stream {
        if self.is_collective() {
            Stream::Communication
        } else {
            Stream::Compute
        }
    }
}

/// One kernel call under an op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelCall {
    #[serde(flatten)]
    pub kind: KernelKind,
}

impl KernelCall {
    pub fn new(kind: KernelKind) -> Self {
        Self { kind }
    }

    pub fn stream(&self) -> Stream {
        self.kind.stream()
    }
}

/// One operator in a trace: its tensor dependencies and kernel calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpNode {
    pub id: u64,
    pub name: String,
    pub inputs: Vec<u64>,
    pub outputs: Vec<u64>,
    pub stream: Stream,
    /// Position among communication ops; present iff any kernel is a
    /// collective. Strictly increasing in trace order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collective_seq: Option<u32>,
    pub kernels: Vec<KernelCall>,
}

impl OpNode {
    /// True iff this op launches a communication collective.
    pub fn is_comm(&self) -> bool {
        self.collective_seq.is_some()
    }
}

/// One rank's execution trace: a topologically ordered op list plus the
/// tensor table it references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionTrace {
    pub schema_version: u32,
    pub rank: u32,
    pub world_size: u32,
    pub tensors: Vec<TensorRef>,
    pub ops: Vec<OpNode>,
}

impl ExecutionTrace {
    /// Communication ops in trace order.
    pub fn comm_ops(&self) -> impl Iterator<Item = &OpNode> {
        self.ops.iter().filter(|op| op.is_comm())
    }
}

/// True iff `op` consumes any tensor produced by `comm_op`. Only
/// `comm_op.outputs` versus `op.inputs` are consulted.
pub fn depends_on(op: &OpNode, comm_op: &OpNode) -> bool {
    op.inputs
        .iter()
        .any(|input| comm_op.outputs.contains(input))
}

/// Parses and validates a trace document. Rejects malformed input.
pub fn parse_trace(bytes: &[u8]) -> Result<ExecutionTrace, TraceError> {
    let trace: ExecutionTrace =
        serde_json::from_slice(bytes).map_err(|e| TraceError::Schema(e.to_string()))?;
    validate_trace(&trace)?;
    Ok(trace)
}

/// Canonical serialization; `parse_trace` of the result round-trips to the
/// same value, and serializing a parsed document reproduces its canonical
/// form byte for byte.
pub fn to_canonical_json(trace: &ExecutionTrace) -> String {
    let mut s = serde_json::to_string_pretty(trace).expect("trace serialization cannot fail");
    s.push('\n');
    s
}

/// Structural validation behind [`parse_trace`]; public so programmatically
/// built traces can be checked with the same rules.
pub fn validate_trace(trace: &ExecutionTrace) -> Result<(), TraceError> {
    if trace.schema_version != SCHEMA_VERSION {
        return Err(TraceError::Schema(format!(
            "unsupported schema_version {} (expected {})",
            trace.schema_version, SCHEMA_VERSION
        )));
    }
    if trace.world_size == 0 {
        return Err(TraceError::Schema("world_size must be >= 1".into()));
    }
    if trace.rank >= trace.world_size {
        return Err(TraceError::Schema(format!(
            "rank {} out of range for world_size {}",
            trace.rank, trace.world_size
        )));
    }

    let mut tensor_ids = BTreeSet::new();
    for t in &trace.tensors {
        if !tensor_ids.insert(t.id) {
            return Err(TraceError::Schema(format!(
                "duplicate tensor id {} in tensor table",
                t.id
            )));
        }
    }

    let mut producer: BTreeMap<u64, usize> = BTreeMap::new();
    let mut last_seq: Option<u32> = None;
    for (pos, op) in trace.ops.iter().enumerate() {
        for &tid in op.inputs.iter().chain(op.outputs.iter()) {
            if !tensor_ids.contains(&tid) {
                return Err(TraceError::DanglingTensor {
                    op_id: op.id,
                    tensor_id: tid,
                });
            }
        }
        for &tid in &op.outputs {
            if producer.insert(tid, pos).is_some() {
                return Err(TraceError::Order(format!(
                    "tensor {tid} produced by more than one op"
                )));
            }
        }

        let has_collective = op.kernels.iter().any(|k| k.kind.is_collective());
        if has_collective != op.collective_seq.is_some() {
            return Err(TraceError::Schema(format!(
                "op {}: collective_seq must be present iff a kernel is a collective",
                op.id
            )));
        }
        for k in &op.kernels {
            if k.stream() != op.stream {
                return Err(TraceError::Schema(format!(
                    "op {}: kernel stream {:?} disagrees with op stream {:?}",
                    op.id,
                    k.stream(),
                    op.stream
                )));
            }
            match &k.kind {
                KernelKind::Fixed { latency_us } => {
                    if !latency_us.is_finite() || *latency_us < 0.0 {
                        return Err(TraceError::Schema(format!(
                            "op {}: fixed latency must be finite and >= 0, got {latency_us}",
                            op.id
                        )));
                    }
                }
                KernelKind::AllToAll { send_bytes } => {
                    let n = send_bytes.len();
                    if n != trace.world_size as usize
                        || send_bytes.iter().any(|row| row.len() != n)
                    {
                        return Err(TraceError::Schema(format!(
                            "op {}: all_to_all send_bytes must be a {ws}x{ws} matrix",
                            op.id,
                            ws = trace.world_size
                        )));
                    }
                }
                _ => {}
            }
        }
        if let Some(seq) = op.collective_seq {
            if let Some(prev) = last_seq {
                if seq <= prev {
                    return Err(TraceError::Order(format!(
                        "collective_seq {seq} at op {} not strictly increasing (previous {prev})",
                        op.id
                    )));
                }
            }
            last_seq = Some(seq);
        }
    }

    // List order must be a valid execution order: every consumed tensor that
    // is produced at all must be produced strictly earlier.
    for (pos, op) in trace.ops.iter().enumerate() {
        for &tid in &op.inputs {
            if let Some(&p) = producer.get(&tid) {
                if p >= pos {
                    return Err(TraceError::Order(format!(
                        "op {} consumes tensor {tid} produced at or after its position",
                        op.id
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Checks that a set of per-rank traces forms a consistent world: matching
/// `world_size`, ranks a permutation of `0..N`, and identical collective
/// schedules (count and kind per `collective_seq`) on every rank. A
/// violation here would deadlock a real job.
pub fn validate_world(traces: &[ExecutionTrace]) -> Result<(), WorldError> {
    let n = traces.len() as u32;
    if n == 0 {
        return Err(WorldError::WorldMismatch("empty world".into()));
    }
    let mut seen = vec![false; n as usize];
    for t in traces {
        if t.world_size != n {
            return Err(WorldError::WorldMismatch(format!(
                "trace for rank {} declares world_size {} but {} traces were given",
                t.rank, t.world_size, n
            )));
        }
        if t.rank >= n || seen[t.rank as usize] {
            return Err(WorldError::WorldMismatch(format!(
                "ranks are not a permutation of 0..{n} (offending rank {})",
                t.rank
            )));
        }
        seen[t.rank as usize] = true;
    }

    let schedule_of = |t: &ExecutionTrace| -> Vec<(u32, &'static str)> {
        t.comm_ops()
            .map(|op| {
                let kind = op
                    .kernels
                    .iter()
                    .find(|k| k.kind.is_collective())
                    .map(|k| match k.kind {
                        KernelKind::AllToAll { .. } => "all_to_all",
                        KernelKind::AllReduce { .. } => "all_reduce",
                        _ => unreachable!(),
                    })
                    .expect("comm op has a collective kernel");
                (op.collective_seq.unwrap(), kind)
            })
            .collect()
    };

    let reference = schedule_of(&traces[0]);
    for t in &traces[1..] {
        let got = schedule_of(t);
        if got.len() != reference.len() {
            return Err(WorldError::CollectiveMismatch(format!(
                "rank {} has {} communication ops, rank {} has {}",
                traces[0].rank,
                reference.len(),
                t.rank,
                got.len()
            )));
        }
        for ((seq_a, kind_a), (seq_b, kind_b)) in reference.iter().zip(got.iter()) {
            if seq_a != seq_b || kind_a != kind_b {
                return Err(WorldError::CollectiveMismatch(format!(
                    "collective schedules diverge: rank {} has {kind_a} at seq {seq_a}, \
                     rank {} has {kind_b} at seq {seq_b}",
                    traces[0].rank, t.rank
                )));
            }
        }
    }
    Ok(())
}
