// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal neuron sets: the shortest prefix of a ranking whose retrained
//! probe comes within `delta` accuracy points of the probe that sees every
//! neuron.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{evaluate, train, ProbeModel, TrainConfig};
use crate::ranking::NeuronRanking;
use crate::search::{fraction_count, TaskData};

/// Share of the neurons added per trial.
pub const STEP_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub num_neurons: usize,
    pub retrained_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub oracle_accuracy: f64,
    /// Threshold in accuracy points (0.5 means half a point).
    pub delta: f64,
    pub step_size: usize,
    pub trials: Vec<Trial>,
    pub minimal_set: Vec<usize>,
    /// True when no trial met the threshold and the full set was taken.
    pub forced: bool,
    pub lambda1: f64,
    pub lambda2: f64,
    pub config: TrainConfig,
}

impl SelectionTrace {
    pub fn accepted(&self) -> &Trial {
        self.trials
            .last()
            .expect("a trace always holds at least one trial")
    }
}

/// Trains the probe on all neurons and measures it on `eval`.
pub fn oracle(
    train_data: TaskData<'_>,
    eval: TaskData<'_>,
    lambda1: f64,
    lambda2: f64,
    config: &TrainConfig,
) -> Result<(ProbeModel, f64)> {
    let model = train(
        train_data.dataset,
        train_data.labels,
        config,
        lambda1,
        lambda2,
        None,
    )?;
    let accuracy = evaluate(&model, eval.dataset, eval.labels)?;
    Ok((model, accuracy))
}

/// Grows the top of `ranking` by 1% of the neurons at a time, retraining a
/// probe on each prefix, until its accuracy on `eval` reaches
/// `oracle_accuracy - delta / 100`. The full set ends the search if no
/// smaller prefix qualifies.
#[allow(clippy::too_many_arguments)]
pub fn minimal_neurons(
    ranking: &NeuronRanking,
    train_data: TaskData<'_>,
    eval: TaskData<'_>,
    oracle_accuracy: f64,
    delta: f64,
    lambda1: f64,
    lambda2: f64,
    config: &TrainConfig,
) -> Result<SelectionTrace> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "delta must be positive, got {delta}"
        )));
    }
    if !ranking.is_complete() {
        return Err(Error::InvalidN {
            requested: ranking.num_candidates,
            available: ranking.len(),
        });
    }
    let total = ranking.len();
    let step = fraction_count(STEP_FRACTION, total);
    let threshold = oracle_accuracy - delta / 100.0;

    let mut trials = Vec::new();
    let mut n = 0;
    let mut forced = false;
    loop {
        n = (n + step).min(total);
        let subset = ranking.top(n);
        let model = train(
            train_data.dataset,
            train_data.labels,
            config,
            lambda1,
            lambda2,
            Some(subset),
        )?;
        let accuracy = evaluate(&model, eval.dataset, eval.labels)?;
        log::info!("minimal set trial: {n} neurons, accuracy {accuracy:.4}");
        trials.push(Trial {
            num_neurons: n,
            retrained_accuracy: accuracy,
        });
        // Tolerance absorbs rounding in oracle - delta/100.
        if accuracy + 1e-12 >= threshold {
            break;
        }
        if n == total {
            forced = true;
            break;
        }
    }
    Ok(SelectionTrace {
        oracle_accuracy,
        delta,
        step_size: step,
        minimal_set: ranking.top(n).to_vec(),
        trials,
        forced,
        lambda1,
        lambda2,
        config: *config,
    })
}
