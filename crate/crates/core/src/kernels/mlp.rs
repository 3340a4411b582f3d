//! MLP regressor for kernel latencies.
//!
//! Models are plain fully connected networks with ReLU hidden layers and a
//! single linear output trained against log-latency, so predictions are
//! always positive after the inverse transform. Training is single-threaded
//! minibatch SGD with learning-rate decay and is bit-reproducible for a
//! fixed seed. Feature standardization and target de-standardization are
//! folded into the first and last layers after training, so the persisted
//! model is self-contained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::KernelError;
use crate::metrics;

/// Transform applied to the training target; predictions invert it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetTransform {
    LogLatency,
}

/// A trained latency model. `weights[l]` is row-major with shape
/// `(layer_dims[l+1], layer_dims[l])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub feature_spec: Vec<String>,
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub target_transform: TargetTransform,
}

/// Per-layer gradients of [`MlpModel::loss_mse`], same shapes as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpModel {
    fn check_features(&self, features: &[f64]) -> Result<(), KernelError> {
        let expected = self.layer_dims[0];
        if features.len() != expected || features.len() != self.feature_spec.len() {
            return Err(KernelError::FeatureMismatch {
                expected,
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Linear network output before the target transform is inverted.
    pub fn raw_output(&self, features: &[f64]) -> Result<f64, KernelError> {
        self.check_features(features)?;
        let mut activation = features.to_vec();
        let last = self.layer_dims.len() - 2;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let fan_in = self.layer_dims[l];
            let fan_out = self.layer_dims[l + 1];
            let mut next = vec![0.0; fan_out];
            for (o, slot) in next.iter_mut().enumerate() {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut z = b[o];
                for (x, wv) in activation.iter().zip(row) {
                    z += x * wv;
                }
                *slot = if l < last { z.max(0.0) } else { z };
            }
            activation = next;
        }
        Ok(activation[0])
    }

    /// Predicted latency in µs.
    pub fn predict(&self, features: &[f64]) -> Result<f64, KernelError> {
        let z = self.raw_output(features)?;
        match self.target_transform {
            TargetTransform::LogLatency => Ok(z.exp()),
        }
    }

    /// Half mean squared error of the raw output against transformed
    /// targets (natural-log latencies for [`TargetTransform::LogLatency`]).
    pub fn loss_mse(&self, features: &[Vec<f64>], targets: &[f64]) -> f64 {
        let n = features.len() as f64;
        features
            .iter()
            .zip(targets)
            .map(|(x, &t)| {
                let r = self.raw_output(x).expect("feature length checked by caller") - t;
                r * r
            })
            .sum::<f64>()
            / (2.0 * n)
    }

    /// Analytic gradients of [`Self::loss_mse`] by backpropagation.
    pub fn gradients(&self, features: &[Vec<f64>], targets: &[f64]) -> MlpGradients {
        let layers = self.weights.len();
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let n = features.len() as f64;

        for (x, &t) in features.iter().zip(targets) {
            // forward, keeping post-activation values per layer
            let mut acts: Vec<Vec<f64>> = vec![x.clone()];
            for l in 0..layers {
                let fan_in = self.layer_dims[l];
                let fan_out = self.layer_dims[l + 1];
                let mut next = vec![0.0; fan_out];
                for (o, slot) in next.iter_mut().enumerate() {
                    let row = &self.weights[l][o * fan_in..(o + 1) * fan_in];
                    let mut z = self.biases[l][o];
                    for (a, wv) in acts[l].iter().zip(row) {
                        z += a * wv;
                    }
                    *slot = if l < layers - 1 { z.max(0.0) } else { z };
                }
                acts.push(next);
            }

            // backward
            let mut delta = vec![(acts[layers][0] - t) / n];
            for l in (0..layers).rev() {
                let fan_in = self.layer_dims[l];
                for (o, &d) in delta.iter().enumerate() {
                    gb[l][o] += d;
                    for i in 0..fan_in {
                        gw[l][o * fan_in + i] += d * acts[l][i];
                    }
                }
                if l > 0 {
                    let mut prev = vec![0.0; fan_in];
                    for i in 0..fan_in {
                        if acts[l][i] > 0.0 {
                            let mut s = 0.0;
                            for (o, &d) in delta.iter().enumerate() {
                                s += d * self.weights[l][o * fan_in + i];
                            }
                            prev[i] = s;
                        }
                    }
                    delta = prev;
                }
            }
        }
        MlpGradients { weights: gw, biases: gb }
    }
}

/// Free-function form of [`MlpModel::predict`].
pub fn mlp_predict(model: &MlpModel, features: &[f64]) -> Result<f64, KernelError> {
    model.predict(features)
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hidden layer widths; input/output widths come from the data.
    pub hidden_dims: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![128, 128],
            learning_rate: 0.05,
            epochs: 200,
            minibatch: 32,
            seed: 0,
        }
    }
}

/// Training result: the folded model, its error on the held-out split, and
/// the per-epoch training loss.
#[derive(Debug, Clone)]
pub struct TrainedMlp {
    pub model: MlpModel,
    pub holdout_gmae: f64,
    pub epoch_losses: Vec<f64>,
}

/// Minimum dataset size accepted by [`mlp_train`].
pub const MIN_TRAIN_ROWS: usize = 32;

const HOLDOUT_FRACTION: f64 = 0.2;

/// Trains an MLP on (features, latency µs) rows against log-latency with
/// MSE loss. The dataset is shuffled with the seed and split 80/20 into
/// train and held-out sets; the returned GMAE is measured on the held-out
/// rows. Deterministic for a fixed `(dataset, config)`.
pub fn mlp_train(
    rows: &[(Vec<f64>, f64)],
    feature_spec: Vec<String>,
    cfg: &TrainConfig,
) -> Result<TrainedMlp, KernelError> {
    if rows.len() < MIN_TRAIN_ROWS {
        return Err(KernelError::EmptyDataset {
            got: rows.len(),
            need: MIN_TRAIN_ROWS,
        });
    }
    let dim_in = feature_spec.len();
    for (row, (x, y)) in rows.iter().enumerate() {
        if x.len() != dim_in {
            return Err(KernelError::FeatureMismatch {
                expected: dim_in,
                got: x.len(),
            });
        }
        if !(y.is_finite() && *y > 0.0) {
            return Err(KernelError::NonPositiveLatency { row, value: *y });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    shuffle(&mut order, &mut rng);
    let holdout = ((rows.len() as f64 * HOLDOUT_FRACTION) as usize).max(1);
    let (test_idx, train_idx) = order.split_at(holdout);

    // standardize features and log-targets on the training split
    let xs: Vec<&Vec<f64>> = train_idx.iter().map(|&i| &rows[i].0).collect();
    let (mean, std) = feature_moments(&xs, dim_in);
    let train_x: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let raw_t: Vec<f64> = train_idx.iter().map(|&i| rows[i].1.ln()).collect();
    let t_mean = raw_t.iter().sum::<f64>() / raw_t.len() as f64;
    let t_var = raw_t.iter().map(|t| (t - t_mean) * (t - t_mean)).sum::<f64>() / raw_t.len() as f64;
    let t_std = if t_var.sqrt() > 1e-12 { t_var.sqrt() } else { 1.0 };
    let train_t: Vec<f64> = raw_t.iter().map(|t| (t - t_mean) / t_std).collect();

    let mut dims = vec![dim_in];
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(1);
    let mut model = init_model(&dims, feature_spec.clone(), &mut rng);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut idx: Vec<usize> = (0..train_x.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate / (1.0 + 9.0 * epoch as f64 / cfg.epochs.max(1) as f64);
        shuffle(&mut idx, &mut rng);
        for chunk in idx.chunks(cfg.minibatch.max(1)) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| train_x[i].clone()).collect();
            let bt: Vec<f64> = chunk.iter().map(|&i| train_t[i]).collect();
            let g = model.gradients(&bx, &bt);
            for l in 0..model.weights.len() {
                for (w, gw) in model.weights[l].iter_mut().zip(&g.weights[l]) {
                    *w -= lr * gw;
                }
                for (b, gb) in model.biases[l].iter_mut().zip(&g.biases[l]) {
                    *b -= lr * gb;
                }
            }
        }
        epoch_losses.push(model.loss_mse(&train_x, &train_t));
    }

    fold_standardization(&mut model, &mean, &std, t_mean, t_std);

    let mut pred = Vec::with_capacity(test_idx.len());
    let mut actual = Vec::with_capacity(test_idx.len());
    for &i in test_idx {
        pred.push(model.predict(&rows[i].0)?);
        actual.push(rows[i].1);
    }
    let holdout_gmae = metrics::gmae(&pred, &actual).expect("held-out split is non-empty");

    Ok(TrainedMlp { model, holdout_gmae, epoch_losses })
}

fn shuffle(idx: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..idx.len()).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
}

fn feature_moments(xs: &[&Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = xs.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; dim];
    for x in xs {
        for (s, (v, m)) in std.iter_mut().zip(x.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    (mean, std)
}

fn init_model(dims: &[usize], feature_spec: Vec<String>, rng: &mut ChaCha8Rng) -> MlpModel {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        // hidden layers: uniform Xavier; output layer: zero, so the model
        // starts at the target mean and grows structure from there
        let bound = if l + 2 == dims.len() {
            0.0
        } else {
            (6.0 / (fan_in + fan_out) as f64).sqrt()
        };
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        weights.push(w);
        biases.push(vec![0.0; fan_out]);
    }
    MlpModel {
        feature_spec,
        layer_dims: dims.to_vec(),
        weights,
        biases,
        target_transform: TargetTransform::LogLatency,
    }
}

/// Rewrites layer 0 to consume raw features and the output layer to emit
/// unstandardized log-latency, leaving the network function unchanged.
fn fold_standardization(model: &mut MlpModel, mean: &[f64], std: &[f64], t_mean: f64, t_std: f64) {
    let fan_in = model.layer_dims[0];
    let fan_out = model.layer_dims[1];
    for o in 0..fan_out {
        let mut shift = 0.0;
        for i in 0..fan_in {
            let w = &mut model.weights[0][o * fan_in + i];
            *w /= std[i];
            shift += *w * mean[i];
        }
        model.biases[0][o] -= shift;
    }
    let last = model.weights.len() - 1;
    for w in &mut model.weights[last] {
        *w *= t_std;
    }
    for b in &mut model.biases[last] {
        *b = *b * t_std + t_mean;
    }
}
