//! Compares the rayon-backed data-parallel paths against their sequential
//! references, and the two simulation engines against each other.
//!
//! Run with `cargo bench -p perfsim-core`.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use perfsim_core::comm::{self, BenchSample, CollectiveKind, CommModelParams};
use perfsim_core::kernels::ModelRegistry;
use perfsim_core::par;
use perfsim_core::sim::{oracle_simulate, simulate, OverheadStats};
use perfsim_core::synth::{synth_trace, SynthSpec};
use perfsim_core::trace::ExecutionTrace;

fn registry() -> ModelRegistry {
    let mut reg = ModelRegistry::default();
    reg.comm
        .insert(CollectiveKind::AllToAll, CommModelParams::smooth(12.0, 1024.0, (16u64 << 20) as f64, 5.0e4, 0.5));
    reg.comm
        .insert(CollectiveKind::AllReduce, CommModelParams::smooth(15.0, 2048.0, (32u64 << 20) as f64, 8.0e4, 0.5));
    reg
}

fn worlds(count: u64) -> Vec<Vec<ExecutionTrace>> {
    (0..count)
        .map(|seed| {
            let spec = SynthSpec {
                ranks: 2 + (seed % 3) as u32,
                ops_per_rank: 80,
                comm_density: 0.25,
                ..Default::default()
            };
            synth_trace(&spec, seed)
        })
        .collect()
}

fn bench_world_sweep(c: &mut Criterion) {
    let reg = registry();
    let ws = worlds(128);
    let overheads = OverheadStats::zero();
    let run = |w: &Vec<ExecutionTrace>| simulate(w, &reg, &overheads).unwrap().total_us;

    let mut group = c.benchmark_group("world_sweep");
    group.bench_function("parallel", |b| {
        b.iter(|| par::map_slice(&ws, run))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_slice_seq(&ws, run))
    });
    group.finish();
}

fn bench_engines(c: &mut Criterion) {
    let reg = registry();
    let spec = SynthSpec {
        ranks: 4,
        ops_per_rank: 200,
        comm_density: 0.25,
        ..Default::default()
    };
    let world = synth_trace(&spec, 7);
    let overheads = OverheadStats::zero();

    let mut group = c.benchmark_group("engines");
    group.bench_function("staged", |b| {
        b.iter(|| simulate(&world, &reg, &overheads).unwrap().total_us)
    });
    group.bench_function("event_queue_oracle", |b| {
        b.iter(|| oracle_simulate(&world, &reg, &overheads).unwrap())
    });
    group.finish();
}

fn bench_comm_fit(c: &mut Criterion) {
    let truth = CommModelParams::smooth(15.0, 1024.0, (64u64 << 20) as f64, 1.0e5, 0.5);
    let samples: Vec<BenchSample> = (2..=30)
        .map(|e| BenchSample {
            message_bytes: 1u64 << e,
            latency_us: comm::predict_latency(&truth, 1u64 << e),
        })
        .collect();

    // fit() fans its sigmoid restarts out through the same helpers, so this
    // measures the end-to-end parallel path.
    c.bench_function("comm_fit", |b| {
        b.iter_batched(
            || samples.clone(),
            |s| comm::fit(&s).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_world_sweep, bench_engines, bench_comm_fit);
criterion_main!(benches);
