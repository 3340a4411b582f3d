//! A world exercising every kernel kind through the full path: canonical
//! serialization, parsing, validation, both simulation engines, and the
//! category breakdown.

use perfsim_core::comm::{CollectiveKind, CommModelParams};
use perfsim_core::kernels::{
    DeviceProfile, EmbeddingTableConfig, MlpModel, ModelRegistry, ReuseFactorVector,
    TargetTransform, EMBEDDING_BWD_MODEL, EMBEDDING_FWD_MODEL,
};
use perfsim_core::sim::{oracle_simulate, simulate, Category, OverheadStats};
use perfsim_core::trace::{
    parse_trace, to_canonical_json, validate_trace, validate_world, ExecutionTrace, KernelCall,
    KernelKind, OpNode, Stream, TensorRef, SCHEMA_VERSION,
};

fn linear_mlp(weight: f64, bias: f64) -> MlpModel {
    MlpModel {
        feature_spec: (0..23).map(|i| format!("f{i}")).collect(),
        layer_dims: vec![23, 1],
        weights: vec![{
            let mut w = vec![0.0; 23];
            w[5] = weight; // total_lookups slot
            w
        }],
        biases: vec![vec![bias]],
        target_transform: TargetTransform::LogLatency,
    }
}

fn full_registry() -> ModelRegistry {
    let mut reg = ModelRegistry::default();
    reg.comm.insert(
        CollectiveKind::AllToAll,
        CommModelParams::smooth(10.0, 1024.0, (4u64 << 20) as f64, 2.0e4, 0.6),
    );
    reg.comm.insert(
        CollectiveKind::AllReduce,
        CommModelParams::smooth(12.0, 1024.0, (4u64 << 20) as f64, 3.0e4, 0.6),
    );
    reg.mlps.insert(EMBEDDING_FWD_MODEL.into(), linear_mlp(2e-6, 3.0));
    reg.mlps.insert(EMBEDDING_BWD_MODEL.into(), linear_mlp(3e-6, 3.2));
    reg.mlps.insert("layer_norm".into(), linear_mlp(0.0, 2.0));
    reg.device = Some(DeviceProfile {
        peak_flops: 1.5e7,
        mem_bw: 9.0e5,
        dram_bytes: 1 << 34,
    });
    reg
}

fn mixed_world() -> Vec<ExecutionTrace> {
    let tables = vec![
        EmbeddingTableConfig { rows: 65536, dim: 64, avg_pooling: 30.0 },
        EmbeddingTableConfig { rows: 1 << 20, dim: 32, avg_pooling: 55.0 },
    ];
    let mut rf = ReuseFactorVector::zero();
    rf.bins[1] = 0.25;
    rf.bins[2] = 0.75;

    (0..2u32)
        .map(|rank| {
            let mut ops = Vec::new();
            let tensors: Vec<TensorRef> =
                (0..8).map(|id| TensorRef { id, bytes: 1024 }).collect();
            let mut push = |name: &str, inputs: Vec<u64>, outputs: Vec<u64>, seq, kind| {
                let id = ops.len() as u64;
                let stream = match &kind {
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
                    kernels: vec![KernelCall::new(kind)],
                });
            };

            push(
                "embedding_fwd",
                vec![],
                vec![0],
                None,
                KernelKind::EmbeddingFwd { tables: tables.clone(), batch_size: 2048, rf },
            );
            push(
                "nccl:all_to_all",
                vec![0],
                vec![1],
                Some(0),
                KernelKind::AllToAll {
                    send_bytes: vec![vec![0, 786_432], vec![786_432, 0]],
                },
            );
            push(
                "aten::addmm",
                vec![1],
                vec![2],
                None,
                KernelKind::Fixed { latency_us: 120.0 },
            );
            push(
                "aten::layer_norm",
                vec![2],
                vec![3],
                None,
                KernelKind::Learned {
                    model: "layer_norm".into(),
                    features: vec![0.0; 23],
                },
            );
            push(
                "aten::gelu",
                vec![3],
                vec![4],
                None,
                KernelKind::Roofline { flops: 6.0e6, bytes: 2.0e6 },
            );
            push(
                "embedding_bwd",
                vec![4],
                vec![5],
                None,
                KernelKind::EmbeddingBwd { tables: tables.clone(), batch_size: 2048, rf },
            );
            push(
                "nccl:all_reduce",
                vec![5],
                vec![6],
                Some(1),
                KernelKind::AllReduce { bytes: 2 << 20 },
            );
            push(
                "aten::copy_",
                vec![6],
                vec![7],
                None,
                KernelKind::Fixed { latency_us: 15.0 },
            );

            ExecutionTrace {
                schema_version: SCHEMA_VERSION,
                rank,
                world_size: 2,
                tensors,
                ops,
            }
        })
        .collect()
}

#[test]
fn mixed_kind_world_round_trips_and_simulates() {
    let world = mixed_world();
    for t in &world {
        validate_trace(t).unwrap();
        let parsed = parse_trace(to_canonical_json(t).as_bytes()).unwrap();
        assert_eq!(&parsed, t);
    }
    validate_world(&world).unwrap();

    let reg = full_registry();
    let overheads = OverheadStats::zero();
    let report = simulate(&world, &reg, &overheads).unwrap();
    let oracle = oracle_simulate(&world, &reg, &overheads).unwrap();
    assert_eq!(report.total_us.to_bits(), oracle.to_bits());
    assert!(report.total_us > 0.0);

    // every active category shows up somewhere
    for cat in [Category::Embedding, Category::Gemm, Category::Memory, Category::Other] {
        let sum: f64 = report.breakdown.iter().map(|b| b.compute[&cat]).sum();
        assert!(sum > 0.0, "no {cat:?} time attributed");
    }
    let comm: f64 = report
        .breakdown
        .iter()
        .map(|b| b.communication[&Category::Comm])
        .sum();
    assert!(comm > 0.0);

    // the dependent chain serializes: nothing larger than the total
    for r in &report.per_rank {
        assert!(r.comm_front_us <= report.total_us);
        assert!(r.compute_front_us <= report.total_us);
    }
}

#[test]
fn mixed_kind_world_is_monotone_in_collective_size() {
    let reg = full_registry();
    let overheads = OverheadStats::zero();
    let base = simulate(&mixed_world(), &reg, &overheads).unwrap().total_us;

    let mut bigger = mixed_world();
    for t in &mut bigger {
        for op in &mut t.ops {
            for k in &mut op.kernels {
                if let KernelKind::AllReduce { bytes } = &mut k.kind {
                    *bytes *= 4;
                }
            }
        }
    }
    let grown = simulate(&bigger, &reg, &overheads).unwrap().total_us;
    assert!(grown > base);
}
