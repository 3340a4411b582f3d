//! Piecewise latency model for communication collectives.
//!
//! Latency as a function of message size splits into three regions: a flat
//! startup-dominated region, an S-shaped transition, and a
//! bandwidth-saturated region that is linear in message size:
//!
//! ```text
//! t(m) = t_s                          m <= m1
//!        log2(m) / 10^sigmoid(x)      m1 < m < m2,  x = log2(m)
//!        t_s + m / bw_max             m >= m2
//! ```
//!
//! with `sigmoid(x) = L / (1 + e^(-k (x - x0))) + b`. Eight parameters per
//! op describe the whole curve, independent of topology and medium. Sizes
//! are bytes, latencies microseconds, bandwidth bytes per microsecond.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum CommError {
    #[error("send_bytes matrix is not square: row {row} has {got} entries, expected {expected}")]
    NonSquareMatrix {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("need at least {need} samples to fit, got {got}")]
    InsufficientData { got: usize, need: usize },
    #[error("degenerate regions: {0}")]
    DegenerateRegions(String),
}

/// Which collective a model or kernel refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllToAll,
    AllReduce,
}

impl CollectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CollectiveKind::AllToAll => "all_to_all",
            CollectiveKind::AllReduce => "all_reduce",
        }
    }
}

/// The eight parameters of the piecewise collective latency model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommModelParams {
    /// Startup latency, µs.
    #[serde(rename = "t_s")]
    pub startup_us: f64,
    /// Upper message size of the flat region, bytes.
    #[serde(rename = "m1")]
    pub flat_end_bytes: f64,
    /// Lower message size of the saturated region, bytes.
    #[serde(rename = "m2")]
    pub saturated_start_bytes: f64,
    /// Sigmoid scale.
    #[serde(rename = "sig_L")]
    pub sig_scale: f64,
    /// Sigmoid midpoint, in log2(bytes).
    #[serde(rename = "sig_x0")]
    pub sig_midpoint: f64,
    /// Sigmoid steepness.
    #[serde(rename = "sig_k")]
    pub sig_steepness: f64,
    /// Sigmoid offset.
    #[serde(rename = "sig_b")]
    pub sig_offset: f64,
    /// Saturated bandwidth, bytes/µs.
    #[serde(rename = "bw_max")]
    pub peak_bw: f64,
}

impl CommModelParams {
    /// Parameters that price every message at `m / bytes_per_us` µs with no
    /// startup cost: the region boundaries sit below one byte so all real
    /// sizes land in the saturated region. Handy for controlled tests.
    pub fn linear(bytes_per_us: f64) -> Self {
        Self {
            startup_us: 0.0,
            flat_end_bytes: 1e-6,
            saturated_start_bytes: 1e-3,
            sig_scale: 0.0,
            sig_midpoint: 0.0,
            sig_steepness: 1.0,
            sig_offset: 0.0,
            peak_bw: bytes_per_us,
        }
    }

    /// Parameters whose transition region meets the flat region at `m1` and
    /// the saturated region at `m2` exactly, with an S-shaped interpolation
    /// of the given steepness in between. The resulting latency curve is
    /// non-decreasing in message size.
    pub fn smooth(
        startup_us: f64,
        flat_end_bytes: f64,
        saturated_start_bytes: f64,
        peak_bw: f64,
        steepness: f64,
    ) -> Self {
        let x1 = flat_end_bytes.log2();
        let x2 = saturated_start_bytes.log2();
        let t2 = startup_us + saturated_start_bytes / peak_bw;
        // anchor the sigmoid so that log2(m)/10^sig(x) hits both endpoints
        let g1 = x1.log10() - startup_us.log10();
        let g2 = x2.log10() - t2.log10();
        let midpoint = 0.5 * (x1 + x2);
        let s1 = 1.0 / (1.0 + (-steepness * (x1 - midpoint)).exp());
        let s2 = 1.0 / (1.0 + (-steepness * (x2 - midpoint)).exp());
        let scale = (g2 - g1) / (s2 - s1);
        let offset = g1 - scale * s1;
        Self {
            startup_us,
            flat_end_bytes,
            saturated_start_bytes,
            sig_scale: scale,
            sig_midpoint: midpoint,
            sig_steepness: steepness,
            sig_offset: offset,
            peak_bw,
        }
    }
}

/// Fitted parameters persisted with their collective kind and platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommModelFile {
    pub kind: CollectiveKind,
    pub platform: String,
    #[serde(flatten)]
    pub params: CommModelParams,
}

/// One microbenchmark measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchSample {
    /// Message size, bytes.
    pub message_bytes: u64,
    /// Measured latency, µs.
    pub latency_us: f64,
}

fn sigmoid(p: &CommModelParams, x: f64) -> f64 {
    p.sig_scale / (1.0 + (-p.sig_steepness * (x - p.sig_midpoint)).exp()) + p.sig_offset
}

/// Predicted latency in µs for a message of `message_bytes`.
pub fn predict_latency(p: &CommModelParams, message_bytes: u64) -> f64 {
    let m = message_bytes as f64;
    if m <= p.flat_end_bytes {
        p.startup_us
    } else if m >= p.saturated_start_bytes {
        p.startup_us + m / p.peak_bw
    } else {
        let x = m.log2();
        x / 10f64.powf(sigmoid(p, x))
    }
}

/// Achieved bandwidth in bytes/µs at a given message size.
pub fn bandwidth(p: &CommModelParams, message_bytes: u64) -> f64 {
    message_bytes as f64 / predict_latency(p, message_bytes)
}

/// Reduces a per-device send matrix to the model's scalar message size: the
/// maximum over devices of max(bytes sent, bytes received). For all-reduce
/// the matrix degenerates to the (equal) per-device size.
pub fn effective_message_size(
    kind: CollectiveKind,
    send_bytes: &[Vec<u64>],
) -> Result<u64, CommError> {
    let n = send_bytes.len();
    for (row, r) in send_bytes.iter().enumerate() {
        if r.len() != n {
            return Err(CommError::NonSquareMatrix {
                row,
                got: r.len(),
                expected: n,
            });
        }
    }
    match kind {
        CollectiveKind::AllToAll => {
            let mut worst = 0u64;
            for d in 0..n {
                let sent: u64 = send_bytes[d].iter().sum();
                let received: u64 = send_bytes.iter().map(|row| row[d]).sum();
                worst = worst.max(sent.max(received));
            }
            Ok(worst)
        }
        CollectiveKind::AllReduce => {
            Ok(send_bytes.iter().flatten().copied().max().unwrap_or(0))
        }
    }
}

/// Minimum number of samples [`fit`] accepts.
pub const MIN_FIT_SAMPLES: usize = 8;

/// Relative tolerance used to detect the region boundaries.
pub const BOUNDARY_TOLERANCE: f64 = 0.05;

const SIGMOID_RESTARTS: usize = 64;
const RESTART_SEED: u64 = 0x636f_6d6d_0f17;

/// Fits the eight model parameters to microbenchmark samples taken at
/// doubling message sizes spanning all three regions.
///
/// Boundaries are detected first: `m1` is the largest size whose latency is
/// within tolerance of the minimum latency, `m2` the smallest size whose
/// bandwidth is within tolerance of the maximum bandwidth. The startup
/// latency is the mean over the flat region, peak bandwidth the maximum of
/// `m / (latency - t_s)`, and the sigmoid is fit to the middle region by
/// multi-start coordinate search on squared log10-latency error.
pub fn fit(samples: &[BenchSample]) -> Result<CommModelParams, CommError> {
    if samples.len() < MIN_FIT_SAMPLES {
        return Err(CommError::InsufficientData {
            got: samples.len(),
            need: MIN_FIT_SAMPLES,
        });
    }
    let mut data = samples.to_vec();
    data.sort_by_key(|s| s.message_bytes);

    let min_latency = data.iter().map(|s| s.latency_us).fold(f64::INFINITY, f64::min);
    let max_bw = data
        .iter()
        .map(|s| s.message_bytes as f64 / s.latency_us)
        .fold(0.0f64, f64::max);

    let flat_end = data
        .iter()
        .filter(|s| s.latency_us <= (1.0 + BOUNDARY_TOLERANCE) * min_latency)
        .map(|s| s.message_bytes)
        .max()
        .expect("min-latency sample exists");
    let saturated_start = data
        .iter()
        .filter(|s| s.message_bytes as f64 / s.latency_us >= (1.0 - BOUNDARY_TOLERANCE) * max_bw)
        .map(|s| s.message_bytes)
        .min()
        .expect("max-bandwidth sample exists");

    if flat_end >= saturated_start {
        return Err(CommError::DegenerateRegions(format!(
            "boundary detection produced m1 = {flat_end} >= m2 = {saturated_start}"
        )));
    }
    let middle: Vec<&BenchSample> = data
        .iter()
        .filter(|s| s.message_bytes > flat_end && s.message_bytes < saturated_start)
        .collect();
    if middle.is_empty() {
        return Err(CommError::DegenerateRegions(
            "no samples strictly between m1 and m2".into(),
        ));
    }

    let startup_us = {
        let flat: Vec<f64> = data
            .iter()
            .filter(|s| s.message_bytes <= flat_end)
            .map(|s| s.latency_us)
            .collect();
        flat.iter().sum::<f64>() / flat.len() as f64
    };

    let peak_bw = data
        .iter()
        .filter_map(|s| {
            let headroom = s.latency_us - startup_us;
            (headroom > 0.0).then(|| s.message_bytes as f64 / headroom)
        })
        .fold(0.0f64, f64::max);
    if peak_bw <= 0.0 {
        return Err(CommError::DegenerateRegions(
            "no sample exceeds the startup latency; cannot place bw_max".into(),
        ));
    }

    // Sigmoid target: choosing params so that log2(m)/10^sig(x) matches the
    // measured latency means sig(x) should track log10(x) - log10(latency).
    let xs: Vec<f64> = middle.iter().map(|s| (s.message_bytes as f64).log2()).collect();
    let targets: Vec<f64> = middle
        .iter()
        .zip(&xs)
        .map(|(s, &x)| x.log10() - s.latency_us.log10())
        .collect();
    let (sig_scale, sig_midpoint, sig_steepness, sig_offset) = fit_sigmoid(&xs, &targets);

    Ok(CommModelParams {
        startup_us,
        flat_end_bytes: flat_end as f64,
        saturated_start_bytes: saturated_start as f64,
        sig_scale,
        sig_midpoint,
        sig_steepness,
        sig_offset,
        peak_bw,
    })
}

fn sigmoid_raw(params: &[f64; 4], x: f64) -> f64 {
    let [scale, midpoint, steepness, offset] = *params;
    scale / (1.0 + (-steepness * (x - midpoint)).exp()) + offset
}

fn sigmoid_loss(params: &[f64; 4], xs: &[f64], targets: &[f64]) -> f64 {
    xs.iter()
        .zip(targets)
        .map(|(&x, &t)| {
            let r = sigmoid_raw(params, x) - t;
            r * r
        })
        .sum()
}

/// Bounded multi-start coordinate search, deterministic across runs and
/// across the parallel/sequential execution paths.
fn fit_sigmoid(xs: &[f64], targets: &[f64]) -> (f64, f64, f64, f64) {
    let x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let t_lo = targets.iter().copied().fold(f64::INFINITY, f64::min);
    let t_hi = targets.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (t_hi - t_lo).max(1e-3);

    let bounds: [(f64, f64); 4] = [
        (-3.0 * span - 1.0, 3.0 * span + 1.0), // scale
        (x_lo - 5.0, x_hi + 5.0),              // midpoint
        (-4.0, 4.0),                           // steepness
        (t_lo - span - 1.0, t_hi + span + 1.0), // offset
    ];

    let restarts: Vec<u64> = (0..SIGMOID_RESTARTS as u64).collect();
    let results = par::map_slice(&restarts, |&r| {
        let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED.wrapping_add(r));
        let mut p = [0.0f64; 4];
        for (i, b) in bounds.iter().enumerate() {
            p[i] = rng.random_range(b.0..b.1);
        }
        coordinate_descent(&mut p, &bounds, xs, targets);
        (sigmoid_loss(&p, xs, targets), p)
    });

    // argmin by (loss, restart index): deterministic regardless of schedule
    let mut best = results[0];
    for r in &results[1..] {
        if r.0 < best.0 {
            best = *r;
        }
    }
    (best.1[0], best.1[1], best.1[2], best.1[3])
}

fn coordinate_descent(p: &mut [f64; 4], bounds: &[(f64, f64); 4], xs: &[f64], targets: &[f64]) {
    const MAX_EVALS: usize = 20_000;
    const MAX_WALK: usize = 64;

    let mut steps = [0.0f64; 4];
    for (i, b) in bounds.iter().enumerate() {
        steps[i] = (b.1 - b.0) / 8.0;
    }
    let mut loss = sigmoid_loss(p, xs, targets);
    let mut evals = 0usize;
    for _round in 0..48 {
        let mut improved = false;
        for i in 0..4 {
            // walk this coordinate while it keeps paying off
            for _ in 0..MAX_WALK {
                let mut moved = false;
                for dir in [-1.0, 1.0] {
                    let candidate = (p[i] + dir * steps[i]).clamp(bounds[i].0, bounds[i].1);
                    if candidate == p[i] {
                        continue;
                    }
                    let old = p[i];
                    p[i] = candidate;
                    let l = sigmoid_loss(p, xs, targets);
                    evals += 1;
                    if l < loss {
                        loss = l;
                        moved = true;
                        improved = true;
                    } else {
                        p[i] = old;
                    }
                }
                if !moved {
                    break;
                }
            }
        }
        for s in &mut steps {
            *s *= 0.5;
        }
        if evals > MAX_EVALS || (!improved && steps.iter().all(|&s| s < 1e-9)) {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> CommModelParams {
        CommModelParams {
            startup_us: 12.0,
            flat_end_bytes: 1024.0,
            saturated_start_bytes: 8192.0,
            sig_scale: -1.0,
            sig_midpoint: 12.0,
            sig_steepness: 0.8,
            sig_offset: 0.1,
            peak_bw: 100.0,
        }
    }

    #[test]
    fn flat_region_returns_startup_latency() {
        let p = params();
        assert_eq!(predict_latency(&p, 64), 12.0);
        assert_eq!(predict_latency(&p, 1024), 12.0);
    }

    #[test]
    fn saturated_region_is_linear() {
        let mut p = params();
        p.startup_us = 10.0;
        // 10 + 10000/100 = 110
        assert_eq!(predict_latency(&p, 10_000), 110.0);
    }

    #[test]
    fn sigmoid_midpoint_identity() {
        // at x = x0 the sigmoid is L/2 + b, so f(2^x0) = x0 / 10^(L/2 + b)
        let p = params();
        let m = 2f64.powf(p.sig_midpoint) as u64;
        let expected = p.sig_midpoint / 10f64.powf(p.sig_scale / 2.0 + p.sig_offset);
        let got = predict_latency(&p, m);
        assert!((got - expected).abs() < 1e-9 * expected.abs(), "{got} vs {expected}");
    }

    #[test]
    fn bandwidth_limits() {
        let p = params();
        // flat region: bandwidth linear in m
        assert_eq!(bandwidth(&p, 512), 512.0 / 12.0);
        // saturated region: approaches peak from below
        let big = 1u64 << 40;
        let bw = bandwidth(&p, big);
        assert!(bw < p.peak_bw);
        assert!(bw > 0.99 * p.peak_bw);
    }

    #[test]
    fn alltoall_effective_size_is_worst_device_bulk() {
        // dev0 sends 100 / receives 200; dev1 sends 200 / receives 100
        let m = vec![vec![0, 100], vec![200, 0]];
        assert_eq!(
            effective_message_size(CollectiveKind::AllToAll, &m).unwrap(),
            200
        );
        let zeros = vec![vec![0, 0], vec![0, 0]];
        assert_eq!(
            effective_message_size(CollectiveKind::AllToAll, &zeros).unwrap(),
            0
        );
    }

    #[test]
    fn alltoall_effective_size_permutation_invariant() {
        let m = vec![vec![5, 9, 1], vec![4, 0, 7], vec![2, 8, 3]];
        let base = effective_message_size(CollectiveKind::AllToAll, &m).unwrap();
        // relabel devices by the permutation (0,1,2) -> (2,0,1)
        let perm = [2usize, 0, 1];
        let mut relabeled = vec![vec![0u64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                relabeled[perm[i]][perm[j]] = m[i][j];
            }
        }
        assert_eq!(
            effective_message_size(CollectiveKind::AllToAll, &relabeled).unwrap(),
            base
        );
    }

    #[test]
    fn allreduce_effective_size_is_per_device_size() {
        let m = vec![vec![4096]];
        assert_eq!(
            effective_message_size(CollectiveKind::AllReduce, &m).unwrap(),
            4096
        );
    }

    #[test]
    fn non_square_matrix_rejected() {
        let m = vec![vec![1, 2], vec![3]];
        assert!(matches!(
            effective_message_size(CollectiveKind::AllToAll, &m),
            Err(CommError::NonSquareMatrix { row: 1, .. })
        ));
    }

    #[test]
    fn too_few_samples_rejected() {
        let samples: Vec<BenchSample> = (0..3)
            .map(|i| BenchSample {
                message_bytes: 4 << i,
                latency_us: 10.0,
            })
            .collect();
        assert!(matches!(
            fit(&samples),
            Err(CommError::InsufficientData { got: 3, need: 8 })
        ));
    }

    #[test]
    fn flat_latency_has_no_saturated_region() {
        let samples: Vec<BenchSample> = (0..20)
            .map(|i| BenchSample {
                message_bytes: 4 << i,
                latency_us: 10.0,
            })
            .collect();
        assert!(matches!(fit(&samples), Err(CommError::DegenerateRegions(_))));
    }

    /// Doubling sizes over 4 B .. 1 GiB sampled straight from the model.
    fn synth_samples(p: &CommModelParams) -> Vec<BenchSample> {
        (2..=30)
            .map(|e| {
                let m = 1u64 << e;
                BenchSample {
                    message_bytes: m,
                    latency_us: predict_latency(p, m),
                }
            })
            .collect()
    }

    fn truth() -> CommModelParams {
        // flat at 15 µs below 1 KiB, saturating at 1e5 bytes/µs past 64 MiB
        CommModelParams::smooth(15.0, 1024.0, (64u64 << 20) as f64, 1.0e5, 0.5)
    }

    #[test]
    fn smooth_params_are_continuous_and_monotone() {
        let p = truth();
        assert!((predict_latency(&p, 1024) - 15.0).abs() < 1e-9);
        let m2 = 64u64 << 20;
        let t2 = 15.0 + m2 as f64 / 1.0e5;
        // transition value just below m2 approaches the saturated line
        let just_below = predict_latency(&p, m2 - 1);
        assert!(just_below <= t2, "{just_below} > {t2}");
        let mut prev = 0.0;
        for e in 2..=32 {
            let t = predict_latency(&p, 1u64 << e);
            assert!(t >= prev, "decreased at 2^{e}");
            prev = t;
        }
    }

    #[test]
    fn fit_recovers_curves_of_varied_shape() {
        let variants = [
            (8.0, 512.0, (8u64 << 20) as f64, 3.0e4, 0.8),
            (25.0, 4096.0, (256u64 << 20) as f64, 2.5e5, 0.3),
            (5.0, 2048.0, (4u64 << 20) as f64, 1.2e4, 1.2),
            (40.0, 1024.0, (1u64 << 30) as f64, 5.0e5, 0.45),
        ];
        for (i, &(ts, m1, m2, bw, k)) in variants.iter().enumerate() {
            let truth = CommModelParams::smooth(ts, m1, m2, bw, k);
            let samples: Vec<BenchSample> = (2..=31)
                .map(|e| {
                    let m = 1u64 << e;
                    BenchSample { message_bytes: m, latency_us: predict_latency(&truth, m) }
                })
                .collect();
            let fitted = fit(&samples).unwrap();
            let mut pred = Vec::new();
            let mut actual = Vec::new();
            for e in 2..31 {
                let m = 2f64.powf(e as f64 + 0.5) as u64;
                pred.push(predict_latency(&fitted, m));
                actual.push(predict_latency(&truth, m));
            }
            let err = crate::metrics::gmae(&pred, &actual).unwrap();
            assert!(err < 0.05, "variant {i}: held-out GMAE {err}");
        }
    }

    #[test]
    fn fit_recovers_known_curve_within_tolerance() {
        let p_true = truth();
        let samples = synth_samples(&p_true);
        let fitted = fit(&samples).unwrap();

        // held-out geometric midpoints between the training sizes
        let mut pred = Vec::new();
        let mut actual = Vec::new();
        for e in 2..30 {
            let m = (2f64.powf(e as f64 + 0.5)) as u64;
            pred.push(predict_latency(&fitted, m));
            actual.push(predict_latency(&p_true, m));
        }
        let err = crate::metrics::gmae(&pred, &actual).unwrap();
        assert!(err < 0.05, "held-out GMAE {err}");
    }

    #[test]
    fn fitted_curve_is_monotone_and_bandwidth_bounded() {
        let fitted = fit(&synth_samples(&truth())).unwrap();
        let mut prev = 0.0;
        let mut m = 4u64;
        while m <= 2 * fitted.saturated_start_bytes as u64 {
            let t = predict_latency(&fitted, m);
            assert!(
                t >= prev - 1e-9,
                "latency decreased at m={m}: {t} < {prev}"
            );
            assert!(
                bandwidth(&fitted, m) <= fitted.peak_bw * (1.0 + 1e-6),
                "bandwidth exceeds bw_max at m={m}"
            );
            prev = t;
            m *= 2;
        }
    }
}
