// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minibatch Adam training and a full-batch proximal solver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{add_penalty_gradient, nll, nll_gradient_into, Batch, Gradient, ProbeModel, TrainedOn};
use crate::dataset::{check_subset, ActivationDataset, LabelColumn};
use crate::error::{Error, Result};

/// Optimizer settings. Defaults: 10 epochs of shuffled batches of 512, Adam
/// with learning rate 1e-3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 512,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon must be positive");
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: &TrainConfig, num_params: usize) -> Self {
        Self {
            learning_rate: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            epsilon: config.adam_epsilon,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update of `params` (in the same order as `grads`).
    pub fn update<'a, 'b>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'b f64>,
    ) {
        self.step += 1;
        let correction1 = 1.0 - self.beta1.powi(self.step);
        let correction2 = 1.0 - self.beta2.powi(self.step);
        for (((p, &g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

fn check_lambdas(lambda1: f64, lambda2: f64) -> Result<()> {
    for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "{name} must be finite and >= 0, got {v}"
            )));
        }
    }
    Ok(())
}

/// Trains a probe with Adam over seeded-shuffled minibatches.
///
/// Weights start at zero. The final partial batch of each epoch is used.
/// With `feature_subset` the probe reads only those neurons (stored sorted).
/// Parameters are rounded to `f32` precision at the end so the model file
/// round-trips exactly. Bitwise deterministic for identical inputs.
pub fn train(
    dataset: &ActivationDataset,
    labels: &LabelColumn,
    config: &TrainConfig,
    lambda1: f64,
    lambda2: f64,
    feature_subset: Option<&[usize]>,
) -> Result<ProbeModel> {
    config.validate()?;
    check_lambdas(lambda1, lambda2)?;
    labels.check_aligned(dataset)?;
    if labels.num_labels() == 0 {
        return Err(Error::InvalidLabels {
            task: labels.task_name.clone(),
            detail: "empty tagset".into(),
        });
    }
    let (neurons, subset) = match feature_subset {
        Some(s) => {
            check_subset(s, dataset.num_neurons())?;
            let mut sorted = s.to_vec();
            sorted.sort_unstable();
            (sorted.clone(), Some(sorted))
        }
        None => ((0..dataset.num_neurons()).collect::<Vec<_>>(), None),
    };
    let width = neurons.len();
    let num_labels = labels.num_labels();

    let mut model = ProbeModel::zeros(num_labels, width).with_lambdas(lambda1, lambda2);
    model.trained_on = TrainedOn {
        dataset_fingerprint: dataset.fingerprint().to_string(),
        input_dim: dataset.num_neurons(),
        feature_subset: subset,
    };
    model.task = labels.task_name.clone();
    model.tagset = labels.tagset.clone();
    model.config = Some(*config);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.num_tokens()).collect();
    let mut adam = Adam::new(config, model.weights.len() + model.bias.len());
    let mut grad = Gradient::zeros(&model);
    let mut probs = Vec::with_capacity(num_labels);
    let mut features = Vec::with_capacity(config.batch_size * width);
    let mut batch_labels = Vec::with_capacity(config.batch_size);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            features.clear();
            batch_labels.clear();
            for &r in chunk {
                let row = dataset.row(r);
                features.extend(neurons.iter().map(|&n| f64::from(row[n])));
                batch_labels.push(labels.labels[r]);
            }
            nll_gradient_into(
                &model,
                Batch::new(&features, &batch_labels),
                &mut grad,
                &mut probs,
            )?;
            add_penalty_gradient(&model, &mut grad);
            adam.update(
                model.weights.iter_mut().chain(model.bias.iter_mut()),
                grad.weights.iter().chain(&grad.bias),
            );
        }
        if !model.is_finite() {
            return Err(Error::Diverged {
                step: adam.steps_taken() as usize,
            });
        }
    }

    for v in model.weights.iter_mut().chain(model.bias.iter_mut()) {
        *v = f64::from(*v as f32);
    }
    Ok(model)
}

/// Outcome of [`solve_full_batch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Norm of the minimum-norm subgradient of the objective at the result.
    pub optimality: f64,
    pub converged: bool,
}

/// Smooth part: mean NLL + lambda2 |W|^2, and its gradient.
fn smooth_value_and_gradient(
    model: &ProbeModel,
    batch: Batch<'_>,
    grad: &mut Gradient,
    probs: &mut Vec<f64>,
) -> Result<f64> {
    nll_gradient_into(model, batch, grad, probs)?;
    for (g, &w) in grad.weights.iter_mut().zip(&model.weights) {
        *g += 2.0 * model.lambda2 * w;
    }
    Ok(nll(model, batch)? + model.lambda2 * model.l2_norm_sq())
}

/// Norm of the smallest element of the objective's subdifferential.
fn min_norm_subgradient(model: &ProbeModel, smooth_grad: &Gradient) -> f64 {
    let l1 = model.lambda1;
    let weights = smooth_grad
        .weights
        .iter()
        .zip(&model.weights)
        .map(|(&g, &w)| {
            if w > 0.0 {
                g + l1
            } else if w < 0.0 {
                g - l1
            } else {
                g.signum() * (g.abs() - l1).max(0.0)
            }
        });
    weights
        .chain(smooth_grad.bias.iter().copied())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Largest eigenvalue of `X~^T X~ / B` where `X~` is `X` with a ones column.
fn feature_gram_norm(batch: Batch<'_>, width: usize) -> f64 {
    let n = batch.len();
    let mut v = vec![1.0; width + 1];
    let mut estimate = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; width + 1];
        for i in 0..n {
            let x = &batch.features[i * width..(i + 1) * width];
            let xv: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[width];
            for (o, &xj) in next.iter_mut().zip(x) {
                *o += xv * xj;
            }
            next[width] += xv;
        }
        let norm = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = norm / n as f64;
        v = next.into_iter().map(|a| a / norm).collect();
    }
    estimate
}

/// Minimizes the full-batch objective with proximal gradient descent
/// (soft-thresholding for the L1 term) until the minimum-norm subgradient
/// falls below `tolerance`.
///
/// Used where an exact optimum matters, e.g. to compare solutions across
/// regularization strengths; [`train`] is the minibatch trainer.
pub fn solve_full_batch(
    batch: Batch<'_>,
    num_labels: usize,
    lambda1: f64,
    lambda2: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<(ProbeModel, SolveReport)> {
    check_lambdas(lambda1, lambda2)?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("batch is empty".into()));
    }
    let width = batch.features.len() / batch.len();
    let mut model = ProbeModel::zeros(num_labels, width).with_lambdas(lambda1, lambda2);
    // Softmax NLL Hessian is bounded by 1/2 * X~^T X~ / B.
    let lipschitz = 1.05 * (0.5 * feature_gram_norm(batch, width) + 2.0 * lambda2);
    let step = 1.0 / lipschitz.max(1e-12);

    let mut grad = Gradient::zeros(&model);
    let mut probs = Vec::with_capacity(num_labels);
    let mut report = SolveReport {
        iterations: 0,
        optimality: f64::INFINITY,
        converged: false,
    };
    for it in 0..=max_iterations {
        smooth_value_and_gradient(&model, batch, &mut grad, &mut probs)?;
        report.iterations = it;
        report.optimality = min_norm_subgradient(&model, &grad);
        if report.optimality < tolerance {
            report.converged = true;
            break;
        }
        if it == max_iterations {
            break;
        }
        let threshold = step * lambda1;
        for (w, &g) in model.weights.iter_mut().zip(&grad.weights) {
            let z = *w - step * g;
            *w = z.signum() * (z.abs() - threshold).max(0.0);
        }
        for (b, &g) in model.bias.iter_mut().zip(&grad.bias) {
            *b -= step * g;
        }
        if !model.is_finite() {
            return Err(Error::Diverged { step: it });
        }
    }
    Ok((model, report))
}
