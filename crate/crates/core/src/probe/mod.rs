// SPDX-License-Identifier: MIT OR Apache-2.0

//! Softmax probe with elastic-net regularization.
//!
//! The objective over a batch of `B` rows is
//!
//! ```text
//! mean_i[-log softmax(W x_i + b)[y_i]] + lambda1 * |W|_1 + lambda2 * |W|_2^2
//! ```
//!
//! with `W` of shape `T x F` (labels by features). The bias is not penalized.

mod file;
mod train;

pub use train::{solve_full_batch, train, Adam, SolveReport, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::dataset::{check_indices, ActivationDataset, LabelColumn};
use crate::error::{Error, Result};

/// What a probe was fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedOn {
    pub dataset_fingerprint: String,
    /// Neuron count of the dataset the probe reads rows from.
    pub input_dim: usize,
    /// Sorted neuron indices the probe uses, `None` for all of them.
    pub feature_subset: Option<Vec<usize>>,
}

/// A trained (or hand-built) linear probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    /// Row-major `num_labels x num_features`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub num_labels: usize,
    pub num_features: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub trained_on: TrainedOn,
    pub task: String,
    pub tagset: Vec<String>,
    pub config: Option<TrainConfig>,
}

impl ProbeModel {
    /// All-zero probe over the full feature set of a `num_features`-wide input.
    pub fn zeros(num_labels: usize, num_features: usize) -> Self {
        Self {
            weights: vec![0.0; num_labels * num_features],
            bias: vec![0.0; num_labels],
            num_labels,
            num_features,
            lambda1: 0.0,
            lambda2: 0.0,
            trained_on: TrainedOn {
                dataset_fingerprint: String::new(),
                input_dim: num_features,
                feature_subset: None,
            },
            task: String::new(),
            tagset: (0..num_labels).map(|t| format!("L{t}")).collect(),
            config: None,
        }
    }

    pub fn with_lambdas(mut self, lambda1: f64, lambda2: f64) -> Self {
        self.lambda1 = lambda1;
        self.lambda2 = lambda2;
        self
    }

    pub fn weight(&self, label: usize, feature: usize) -> f64 {
        self.weights[label * self.num_features + feature]
    }

    pub fn label_weights(&self, label: usize) -> &[f64] {
        let start = label * self.num_features;
        &self.weights[start..start + self.num_features]
    }

    /// Dataset neuron index of every model feature.
    pub fn feature_neurons(&self) -> Vec<usize> {
        match &self.trained_on.feature_subset {
            Some(subset) => subset.clone(),
            None => (0..self.num_features).collect(),
        }
    }

    /// True when the probe reads every neuron of its input, in order.
    pub fn is_full(&self) -> bool {
        self.trained_on.feature_subset.is_none()
    }

    /// `W x + b`.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.num_features {
            return Err(Error::DimensionMismatch {
                expected: self.num_features,
                found: features.len(),
            });
        }
        Ok(self.logits_unchecked(features))
    }

    fn logits_unchecked(&self, features: &[f64]) -> Vec<f64> {
        (0..self.num_labels)
            .map(|t| {
                let w = self.label_weights(t);
                self.bias[t] + dot(w, features)
            })
            .collect()
    }

    /// Softmax probabilities for one feature row.
    pub fn predict_proba(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut logits = self.logits(features)?;
        softmax_in_place(&mut logits);
        Ok(logits)
    }

    pub fn l1_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn check_input(&self, dataset: &ActivationDataset) -> Result<()> {
        if dataset.num_neurons() != self.trained_on.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.trained_on.input_dim,
                found: dataset.num_neurons(),
            });
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A batch of feature rows (row-major `len x num_features`) with gold labels.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(features: &'a [f64], labels: &'a [usize]) -> Self {
        Self { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check(&self, model: &ProbeModel) -> Result<usize> {
        if self.is_empty() {
            return Err(Error::InvalidConfig("batch is empty".into()));
        }
        let width = self.features.len() / self.len();
        if width * self.len() != self.features.len() || width != model.num_features {
            return Err(Error::DimensionMismatch {
                expected: model.num_features * self.len(),
                found: self.features.len(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= model.num_labels) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                num_neurons: model.num_labels,
            });
        }
        Ok(width)
    }

    fn row(&self, i: usize, width: usize) -> &'a [f64] {
        &self.features[i * width..(i + 1) * width]
    }
}

/// Mean negative log-likelihood of `batch`, without penalties.
pub fn nll(model: &ProbeModel, batch: Batch<'_>) -> Result<f64> {
    let width = batch.check(model)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let logits = model.logits_unchecked(batch.row(i, width));
        total += log_sum_exp(&logits) - logits[batch.labels[i]];
    }
    Ok(total / batch.len() as f64)
}

/// Regularized objective: mean NLL plus `lambda1 |W|_1 + lambda2 |W|_2^2`.
pub fn loss(model: &ProbeModel, batch: Batch<'_>) -> Result<f64> {
    Ok(nll(model, batch)? + model.lambda1 * model.l1_norm() + model.lambda2 * model.l2_norm_sq())
}

/// Gradient of [`loss`] with respect to the weights and the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradient {
    pub fn zeros(model: &ProbeModel) -> Self {
        Self {
            weights: vec![0.0; model.weights.len()],
            bias: vec![0.0; model.bias.len()],
        }
    }

    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(&self.bias)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Gradient of the mean NLL only, accumulated into `out`.
pub(crate) fn nll_gradient_into(
    model: &ProbeModel,
    batch: Batch<'_>,
    out: &mut Gradient,
    probs: &mut Vec<f64>,
) -> Result<()> {
    let width = batch.check(model)?;
    out.weights.iter_mut().for_each(|g| *g = 0.0);
    out.bias.iter_mut().for_each(|g| *g = 0.0);
    let scale = 1.0 / batch.len() as f64;
    for i in 0..batch.len() {
        let x = batch.row(i, width);
        probs.clear();
        probs.extend((0..model.num_labels).map(|t| model.bias[t] + dot(model.label_weights(t), x)));
        softmax_in_place(probs);
        probs[batch.labels[i]] -= 1.0;
        for (t, &r) in probs.iter().enumerate() {
            let r = r * scale;
            out.bias[t] += r;
            let row = &mut out.weights[t * width..(t + 1) * width];
            for (g, &xj) in row.iter_mut().zip(x) {
                *g += r * xj;
            }
        }
    }
    Ok(())
}

/// Adds the penalty derivative: `lambda1 * sign(w) + 2 * lambda2 * w`, with
/// `sign(0) = 0`.
pub(crate) fn add_penalty_gradient(model: &ProbeModel, out: &mut Gradient) {
    for (g, &w) in out.weights.iter_mut().zip(&model.weights) {
        let sign = if w > 0.0 {
            1.0
        } else if w < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g += model.lambda1 * sign + 2.0 * model.lambda2 * w;
    }
}

/// Analytic gradient of [`loss`] (L1 subgradient taken as 0 at 0).
pub fn gradient(model: &ProbeModel, batch: Batch<'_>) -> Result<Gradient> {
    let mut out = Gradient::zeros(model);
    let mut probs = Vec::with_capacity(model.num_labels);
    nll_gradient_into(model, batch, &mut out, &mut probs)?;
    add_penalty_gradient(model, &mut out);
    Ok(out)
}

/// Writes the model's features for dataset row `row` into `out`; neurons with
/// `keep[n] == false` read as zero.
fn gather(row: &[f32], neurons: &[usize], keep: Option<&[bool]>, out: &mut [f64]) {
    for (dst, &n) in out.iter_mut().zip(neurons) {
        *dst = match keep {
            Some(mask) if !mask[n] => 0.0,
            _ => f64::from(row[n]),
        };
    }
}

/// Predicted label per row, reading only the neurons marked in `keep`.
fn predict_masked(
    model: &ProbeModel,
    dataset: &ActivationDataset,
    keep: Option<&[bool]>,
) -> Result<Vec<usize>> {
    model.check_input(dataset)?;
    let neurons = model.feature_neurons();
    let mut features = vec![0.0; model.num_features];
    Ok((0..dataset.num_tokens())
        .map(|r| {
            gather(dataset.row(r), &neurons, keep, &mut features);
            argmax(&model.logits_unchecked(&features))
        })
        .collect())
}

/// Predicted label for every row of `dataset`.
pub fn predict(model: &ProbeModel, dataset: &ActivationDataset) -> Result<Vec<usize>> {
    predict_masked(model, dataset, None)
}

fn accuracy(predicted: &[usize], labels: &LabelColumn) -> f64 {
    let correct = predicted
        .iter()
        .zip(&labels.labels)
        .filter(|(p, g)| p == g)
        .count();
    correct as f64 / labels.len() as f64
}

fn check_labels(
    model: &ProbeModel,
    dataset: &ActivationDataset,
    labels: &LabelColumn,
) -> Result<()> {
    labels.check_aligned(dataset)?;
    if labels.num_labels() != model.num_labels {
        return Err(Error::DimensionMismatch {
            expected: model.num_labels,
            found: labels.num_labels(),
        });
    }
    Ok(())
}

/// Token-level accuracy of argmax predictions.
pub fn evaluate(
    model: &ProbeModel,
    dataset: &ActivationDataset,
    labels: &LabelColumn,
) -> Result<f64> {
    let all: Vec<usize> = (0..dataset.num_neurons()).collect();
    evaluate_ablated(model, dataset, labels, &all)
}

/// Accuracy with every neuron outside `keep_set` zeroed at test time.
pub fn evaluate_ablated(
    model: &ProbeModel,
    dataset: &ActivationDataset,
    labels: &LabelColumn,
    keep_set: &[usize],
) -> Result<f64> {
    check_labels(model, dataset, labels)?;
    check_indices(keep_set, dataset.num_neurons())?;
    let mut mask = vec![false; dataset.num_neurons()];
    for &n in keep_set {
        mask[n] = true;
    }
    let predicted = predict_masked(model, dataset, Some(&mask))?;
    Ok(accuracy(&predicted, labels))
}

/// Linguistic accuracy minus control accuracy.
pub fn selectivity(acc_linguistic: f64, acc_control: f64) -> f64 {
    acc_linguistic - acc_control
}

#[cfg(test)]
mod tests;
