//! Per-kernel latency prediction.
//!
//! Embedding lookups are predicted by an MLP over table parameters and
//! reuse factors of the batch; elementwise ops by a roofline bound;
//! collectives by the piecewise model in [`crate::comm`]. A
//! [`ModelRegistry`] holds the assets and dispatches a [`KernelCall`] to
//! its predicted latency in µs.

pub mod mlp;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comm::{self, CollectiveKind, CommError, CommModelParams};
use crate::trace::{KernelCall, KernelKind};

pub use mlp::{mlp_predict, mlp_train, MlpGradients, MlpModel, TargetTransform, TrainConfig, TrainedMlp};

/// Number of reuse-factor bins.
pub const RF_BINS: usize = 17;

/// Registry key of the embedding-lookup forward model.
pub const EMBEDDING_FWD_MODEL: &str = "elf";
/// Registry key of the embedding-lookup backward model.
pub const EMBEDDING_BWD_MODEL: &str = "elb";

/// Tables with a mean pooling factor at or above this are "heavy".
pub const HEAVY_POOLING_THRESHOLD: f64 = 20.0;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("no model registered for '{0}'")]
    UnknownModel(String),
    #[error("feature vector length {got} does not match the model's {expected}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("roofline kernel with zero flops and zero bytes")]
    ZeroWork,
    #[error("dataset too small: {got} rows, need at least {need}")]
    EmptyDataset { got: usize, need: usize },
    #[error("latency at row {row} is not positive: {value}")]
    NonPositiveLatency { row: usize, value: f64 },
    #[error(transparent)]
    Comm(#[from] CommError),
}

/// Shape and load parameters of one embedding table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingTableConfig {
    /// Number of rows (embeddings).
    pub rows: u64,
    /// Embedding dimension.
    pub dim: u32,
    /// Mean pooling factor: lookups per data sample.
    pub avg_pooling: f64,
}

impl EmbeddingTableConfig {
    /// Bytes per row at FP32.
    pub fn row_bytes(&self) -> u64 {
        self.dim as u64 * 4
    }

    /// Total table footprint in bytes.
    pub fn total_bytes(&self) -> u64 {
        self.rows * self.row_bytes()
    }
}

/// True for tables whose mean pooling factor marks them as heavy.
pub fn is_heavy_table(t: &EmbeddingTableConfig) -> bool {
    t.avg_pooling >= HEAVY_POOLING_THRESHOLD
}

/// Normalized histogram-of-histogram of lookup indices: bin `i` holds the
/// fraction of distinct accessed indices whose access count falls in
/// `[2^(i-1), 2^i)` (bin 0 covers `[0,1)` and the last bin is open-ended).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReuseFactorVector {
    pub bins: [f64; RF_BINS],
}

impl ReuseFactorVector {
    pub fn zero() -> Self {
        Self { bins: [0.0; RF_BINS] }
    }
}

impl Default for ReuseFactorVector {
    fn default() -> Self {
        Self::zero()
    }
}

/// Access count per distinct index over all samples of a batch.
pub fn access_counts(indices: &[Vec<u64>]) -> BTreeMap<u64, u64> {
    let mut counts = BTreeMap::new();
    for sample in indices {
        for &ix in sample {
            *counts.entry(ix).or_insert(0) += 1;
        }
    }
    counts
}

fn count_bin(count: u64, num_bins: usize) -> usize {
    if count == 0 {
        return 0;
    }
    let exp = 63 - count.leading_zeros() as usize; // floor(log2(count))
    (exp + 1).min(num_bins - 1)
}

/// Reuse-factor histogram with a configurable bin count; bins are
/// `[0,1), [1,2), [2,4), ...` with the last bin open-ended, normalized by
/// the number of distinct accessed indices. Empty input yields all zeros.
pub fn compute_rf_with_bins(indices: &[Vec<u64>], num_bins: usize) -> Vec<f64> {
    let counts = access_counts(indices);
    let mut bins = vec![0.0; num_bins];
    if counts.is_empty() {
        return bins;
    }
    for &c in counts.values() {
        bins[count_bin(c, num_bins)] += 1.0;
    }
    let distinct = counts.len() as f64;
    for b in &mut bins {
        *b /= distinct;
    }
    bins
}

/// Reuse factors of a batch with the standard 17 bins.
pub fn compute_rf(indices: &[Vec<u64>]) -> ReuseFactorVector {
    let v = compute_rf_with_bins(indices, RF_BINS);
    let mut bins = [0.0; RF_BINS];
    bins.copy_from_slice(&v);
    ReuseFactorVector { bins }
}

/// Feature names produced by [`el_features`], in order.
pub fn el_feature_spec() -> Vec<String> {
    let mut spec = vec![
        "log2_batch_size".to_string(),
        "num_tables".to_string(),
        "sum_log2_rows".to_string(),
        "mean_dim".to_string(),
        "mean_pooling".to_string(),
        "total_lookups".to_string(),
    ];
    for i in 0..RF_BINS {
        spec.push(format!("rf_{i}"));
    }
    spec
}

/// Sum in ascending value order, so the result is identical under any
/// permutation of the inputs.
fn symmetric_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Feature vector for the embedding-lookup cost models: batch size,
/// aggregate table shape, total lookup work, and the batch's reuse factors.
/// Aggregates are symmetric, so table order does not matter (exactly: sums
/// are accumulated in a canonical order).
pub fn el_features(
    tables: &[EmbeddingTableConfig],
    batch_size: u32,
    rf: &ReuseFactorVector,
) -> Vec<f64> {
    let n = tables.len() as f64;
    let sum_log2_rows = symmetric_sum(tables.iter().map(|t| (t.rows as f64).log2()));
    let sum_dim = symmetric_sum(tables.iter().map(|t| t.dim as f64));
    let sum_pooling = symmetric_sum(tables.iter().map(|t| t.avg_pooling));
    let mut v = vec![
        (batch_size as f64).log2(),
        n,
        sum_log2_rows,
        if n > 0.0 { sum_dim / n } else { 0.0 },
        if n > 0.0 { sum_pooling / n } else { 0.0 },
        batch_size as f64 * sum_pooling,
    ];
    v.extend_from_slice(&rf.bins);
    v
}

/// Roofline device constants. FLOP/µs and bytes/µs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    pub peak_flops: f64,
    pub mem_bw: f64,
    pub dram_bytes: u64,
}

/// Roofline latency: the kernel is bound by whichever of compute and memory
/// traffic takes longer.
pub fn roofline_predict(device: &DeviceProfile, flops: f64, bytes: f64) -> Result<f64, KernelError> {
    if flops == 0.0 && bytes == 0.0 {
        return Err(KernelError::ZeroWork);
    }
    Ok((flops / device.peak_flops).max(bytes / device.mem_bw))
}

/// Prediction assets: collective model parameters per kind, learned models
/// by name, and the device profile for roofline kernels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    #[serde(default)]
    pub comm: BTreeMap<CollectiveKind, CommModelParams>,
    #[serde(default)]
    pub mlps: BTreeMap<String, MlpModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device: Option<DeviceProfile>,
}

impl ModelRegistry {
    /// Predicted latency in µs for one kernel call.
    pub fn kernel_latency(&self, kernel: &KernelCall) -> Result<f64, KernelError> {
        match &kernel.kind {
            KernelKind::Fixed { latency_us } => Ok(*latency_us),
            KernelKind::AllToAll { send_bytes } => {
                let p = self.comm_params(CollectiveKind::AllToAll)?;
                let m = comm::effective_message_size(CollectiveKind::AllToAll, send_bytes)?;
                Ok(comm::predict_latency(p, m))
            }
            KernelKind::AllReduce { bytes } => {
                let p = self.comm_params(CollectiveKind::AllReduce)?;
                Ok(comm::predict_latency(p, *bytes))
            }
            KernelKind::EmbeddingFwd { tables, batch_size, rf } => {
                self.predict_learned(EMBEDDING_FWD_MODEL, &el_features(tables, *batch_size, rf))
            }
            KernelKind::EmbeddingBwd { tables, batch_size, rf } => {
                self.predict_learned(EMBEDDING_BWD_MODEL, &el_features(tables, *batch_size, rf))
            }
            KernelKind::Roofline { flops, bytes } => {
                let device = self
                    .device
                    .as_ref()
                    .ok_or_else(|| KernelError::UnknownModel("device".into()))?;
                roofline_predict(device, *flops, *bytes)
            }
            KernelKind::Learned { model, features } => self.predict_learned(model, features),
        }
    }

    fn comm_params(&self, kind: CollectiveKind) -> Result<&CommModelParams, KernelError> {
        self.comm
            .get(&kind)
            .ok_or_else(|| KernelError::UnknownModel(kind.as_str().into()))
    }

    fn predict_learned(&self, name: &str, features: &[f64]) -> Result<f64, KernelError> {
        let model = self
            .mlps
            .get(name)
            .ok_or_else(|| KernelError::UnknownModel(name.into()))?;
        mlp_predict(model, features)
    }
}

/// Latency source consumed by the simulator. [`ModelRegistry`] is the
/// standard implementation; wrappers can perturb or scale predictions.
pub trait LatencyModel: Sync {
    fn kernel_latency(&self, kernel: &KernelCall) -> Result<f64, KernelError>;
}

impl LatencyModel for ModelRegistry {
    fn kernel_latency(&self, kernel: &KernelCall) -> Result<f64, KernelError> {
        ModelRegistry::kernel_latency(self, kernel)
    }
}

/// Wraps a latency model with deterministic multiplicative noise, keyed by
/// the kernel payload: the same kernel always gets the same perturbation,
/// so the wrapper behaves like a consistent alternate ground truth.
pub struct PerturbedLatency<'a, M: LatencyModel> {
    inner: &'a M,
    seed: u64,
    amplitude: f64,
}

impl<'a, M: LatencyModel> PerturbedLatency<'a, M> {
    /// `amplitude` is the maximum relative perturbation, e.g. 0.05 for ±5%.
    pub fn new(inner: &'a M, seed: u64, amplitude: f64) -> Self {
        Self { inner, seed, amplitude }
    }
}

fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl<M: LatencyModel> LatencyModel for PerturbedLatency<'_, M> {
    fn kernel_latency(&self, kernel: &KernelCall) -> Result<f64, KernelError> {
        let base = self.inner.kernel_latency(kernel)?;
        let key = serde_json::to_vec(kernel).expect("kernel serialization cannot fail");
        let h = fnv1a(&key, self.seed);
        // top 53 bits -> [0,1) -> [-amplitude, amplitude)
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        Ok(base * (1.0 + self.amplitude * (2.0 * unit - 1.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::KernelCall;

    /// The four-sample batch used throughout: s0..s3 with 8 distinct
    /// indices, 3 hit once, 4 hit twice, 1 hit three times.
    fn example_batch() -> Vec<Vec<u64>> {
        vec![vec![0, 1, 4, 6], vec![1, 2, 3, 5, 7], vec![0, 5, 7], vec![1, 6]]
    }

    #[test]
    fn access_counts_match_hand_tally() {
        let counts = access_counts(&example_batch());
        // index -> count: 0:2 1:3 2:1 3:1 4:1 5:2 6:2 7:2
        let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
        for &c in counts.values() {
            *hist.entry(c).or_insert(0) += 1;
        }
        assert_eq!(hist, BTreeMap::from([(1, 3), (2, 4), (3, 1)]));
    }

    #[test]
    fn rf_binning_matches_bruteforce_edges() {
        let rf = compute_rf(&example_batch());

        // Independent tally against the literal bin edges.
        let edges: Vec<(u64, u64)> = {
            let mut e = vec![(0, 1)];
            let mut lo = 1u64;
            for _ in 1..RF_BINS - 1 {
                e.push((lo, lo * 2));
                lo *= 2;
            }
            e.push((lo, u64::MAX));
            e
        };
        let counts = access_counts(&example_batch());
        let mut expected = [0.0; RF_BINS];
        for &c in counts.values() {
            let bin = edges.iter().position(|&(lo, hi)| c >= lo && c < hi).unwrap();
            expected[bin] += 1.0;
        }
        for b in &mut expected {
            *b /= counts.len() as f64;
        }
        assert_eq!(rf.bins, expected);
        assert_eq!(rf.bins[1], 0.375); // [1,2)
        assert_eq!(rf.bins[2], 0.625); // [2,4)
        assert_eq!(rf.bins.iter().filter(|&&b| b != 0.0).count(), 2);
    }

    #[test]
    fn rf_bins_sum_to_one_and_ignore_permutations() {
        let batch = example_batch();
        let rf = compute_rf(&batch);
        let sum: f64 = rf.bins.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);

        let mut shuffled = batch.clone();
        shuffled.reverse();
        for s in &mut shuffled {
            s.reverse();
        }
        assert_eq!(compute_rf(&shuffled), rf);
    }

    #[test]
    fn rf_single_distinct_index() {
        let batch: Vec<Vec<u64>> = (0..6).map(|_| vec![42]).collect();
        let rf = compute_rf(&batch);
        // count 6 falls in [4,8) = bin 3
        assert_eq!(rf.bins[3], 1.0);
        assert_eq!(rf.bins.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn rf_empty_input_is_zero() {
        assert_eq!(compute_rf(&[]), ReuseFactorVector::zero());
        assert_eq!(compute_rf(&[vec![]]), ReuseFactorVector::zero());
    }

    #[test]
    fn rf_huge_count_lands_in_open_ended_bin() {
        let batch = vec![vec![7u64; 40_000]];
        let rf = compute_rf(&batch);
        assert_eq!(rf.bins[RF_BINS - 1], 1.0);
    }

    fn one_table() -> EmbeddingTableConfig {
        EmbeddingTableConfig { rows: 1024, dim: 64, avg_pooling: 1.0 }
    }

    #[test]
    fn el_features_places_direct_arithmetic() {
        let v = el_features(&[one_table()], 256, &ReuseFactorVector::zero());
        assert_eq!(v.len(), el_feature_spec().len());
        assert_eq!(v[0], 8.0); // log2(256)
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], 10.0); // log2(1024)
        assert_eq!(v[3], 64.0);
        assert_eq!(v[4], 1.0);
        assert_eq!(v[5], 256.0);
    }

    #[test]
    fn el_features_symmetric_in_table_order() {
        let tables = vec![
            EmbeddingTableConfig { rows: 100, dim: 16, avg_pooling: 3.0 },
            EmbeddingTableConfig { rows: 5000, dim: 128, avg_pooling: 40.0 },
            EmbeddingTableConfig { rows: 77, dim: 8, avg_pooling: 0.5 },
        ];
        let mut reversed = tables.clone();
        reversed.reverse();
        let rf = ReuseFactorVector::zero();
        assert_eq!(el_features(&tables, 512, &rf), el_features(&reversed, 512, &rf));
    }

    #[test]
    fn el_features_log2_batch_increment() {
        let t = [one_table()];
        let rf = ReuseFactorVector::zero();
        let a = el_features(&t, 512, &rf);
        let b = el_features(&t, 1024, &rf);
        assert_eq!(b[0] - a[0], 1.0);
    }

    #[test]
    fn roofline_picks_the_binding_term() {
        let dev = DeviceProfile { peak_flops: 1.0e7, mem_bw: 9.0e5, dram_bytes: 1 << 34 };
        // memory-bound: 8 MiB / 9e5 bytes/µs ≈ 9.32 µs, flops term far smaller
        let bytes = 8.0 * (1u64 << 20) as f64;
        let t = roofline_predict(&dev, 1000.0, bytes).unwrap();
        assert!((t - bytes / 9.0e5).abs() < 1e-12);
        assert!((t - 9.32).abs() < 0.01);
        // compute-bound
        let t = roofline_predict(&dev, 5.0e8, 8.0).unwrap();
        assert_eq!(t, 50.0);
        assert!(matches!(roofline_predict(&dev, 0.0, 0.0), Err(KernelError::ZeroWork)));
    }

    #[test]
    fn roofline_is_homogeneous() {
        let dev = DeviceProfile { peak_flops: 3.0e6, mem_bw: 7.0e5, dram_bytes: 1 << 34 };
        let base = roofline_predict(&dev, 1.0e6, 2.0e6).unwrap();
        let scaled = roofline_predict(&dev, 3.0e6, 6.0e6).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-9 * scaled);
    }

    #[test]
    fn dispatch_fixed_and_unknown() {
        let reg = ModelRegistry::default();
        let fixed = KernelCall::new(KernelKind::Fixed { latency_us: 7.5 });
        assert_eq!(reg.kernel_latency(&fixed).unwrap(), 7.5);

        let ar = KernelCall::new(KernelKind::AllReduce { bytes: 4096 });
        assert!(matches!(
            reg.kernel_latency(&ar),
            Err(KernelError::UnknownModel(name)) if name == "all_reduce"
        ));
    }

    #[test]
    fn dispatch_collective_composes_with_comm_model() {
        let p = CommModelParams {
            startup_us: 10.0,
            flat_end_bytes: 1e-6,
            saturated_start_bytes: 1e-3,
            sig_scale: 0.0,
            sig_midpoint: 0.0,
            sig_steepness: 1.0,
            sig_offset: 0.0,
            peak_bw: 100.0,
        };
        let mut reg = ModelRegistry::default();
        reg.comm.insert(CollectiveKind::AllReduce, p);
        let ar = KernelCall::new(KernelKind::AllReduce { bytes: 4096 });
        assert_eq!(
            reg.kernel_latency(&ar).unwrap(),
            comm::predict_latency(&p, 4096)
        );
    }

    #[test]
    fn dispatch_learned_and_roofline_match_direct_calls() {
        let model = MlpModel {
            feature_spec: vec!["a".into(), "b".into()],
            layer_dims: vec![2, 1],
            weights: vec![vec![0.3, -0.2]],
            biases: vec![vec![1.1]],
            target_transform: mlp::TargetTransform::LogLatency,
        };
        let device = DeviceProfile { peak_flops: 2.0e6, mem_bw: 4.0e5, dram_bytes: 1 << 34 };
        let mut reg = ModelRegistry::default();
        reg.mlps.insert("layer_norm".into(), model.clone());
        reg.device = Some(device);

        let features = vec![2.0, 5.0];
        let learned = KernelCall::new(KernelKind::Learned {
            model: "layer_norm".into(),
            features: features.clone(),
        });
        assert_eq!(
            reg.kernel_latency(&learned).unwrap(),
            mlp_predict(&model, &features).unwrap()
        );

        let roofline = KernelCall::new(KernelKind::Roofline { flops: 1.0e6, bytes: 8.0e5 });
        assert_eq!(
            reg.kernel_latency(&roofline).unwrap(),
            roofline_predict(&device, 1.0e6, 8.0e5).unwrap()
        );

        let missing = KernelCall::new(KernelKind::Learned { model: "dropout".into(), features });
        assert!(matches!(
            reg.kernel_latency(&missing),
            Err(KernelError::UnknownModel(name)) if name == "dropout"
        ));
    }

    #[test]
    fn perturbed_latency_is_stable_and_bounded() {
        let mut reg = ModelRegistry::default();
        reg.comm.insert(
            CollectiveKind::AllReduce,
            CommModelParams {
                startup_us: 0.0,
                flat_end_bytes: 1e-6,
                saturated_start_bytes: 1e-3,
                sig_scale: 0.0,
                sig_midpoint: 0.0,
                sig_steepness: 1.0,
                sig_offset: 0.0,
                peak_bw: 1.0,
            },
        );
        let noisy = PerturbedLatency::new(&reg, 17, 0.05);
        let k = KernelCall::new(KernelKind::Fixed { latency_us: 100.0 });
        let a = noisy.kernel_latency(&k).unwrap();
        let b = noisy.kernel_latency(&k).unwrap();
        assert_eq!(a, b);
        assert!((95.0..=105.0).contains(&a), "{a}");

        // a different kernel gets a different draw
        let k2 = KernelCall::new(KernelKind::Fixed { latency_us: 100.0001 });
        let c = noisy.kernel_latency(&k2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn heavy_table_threshold() {
        assert!(is_heavy_table(&EmbeddingTableConfig { rows: 1, dim: 1, avg_pooling: 20.0 }));
        assert!(!is_heavy_table(&EmbeddingTableConfig { rows: 1, dim: 1, avg_pooling: 19.9 }));
    }
}
