// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron ranking from probe weights.
//!
//! For every label the neurons are sorted by absolute weight. A mass fraction
//! `p` grows in steps of `p_step`; at each step every label contributes the
//! shortest prefix of its order whose absolute weight reaches `p` of its total,
//! and the union of these prefixes grows until it holds the requested number
//! of neurons.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeModel;

/// Mass increment used by [`select_top`]: 0.1% of each label's weight mass.
pub const DEFAULT_P_STEP: f64 = 0.001;

/// Ordered neurons with per-label attribution.
///
/// Neuron ids are indices into the dataset the probe reads, not into the
/// probe's own feature subset.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronRanking {
    pub ordered_neurons: Vec<usize>,
    /// Mass fraction at which each neuron of `ordered_neurons` first entered.
    pub inclusion_mass: Vec<f64>,
    /// Labels whose mass prefix held the neuron when the search stopped.
    pub attributed_labels: Vec<Vec<usize>>,
    /// For every label, all ranked neurons sorted by |weight| descending.
    /// Not stored in ranking files.
    pub per_label_order: Vec<Vec<usize>>,
    pub tagset: Vec<String>,
    /// Number of neurons the probe ranks over.
    pub num_candidates: usize,
    pub p_step: f64,
}

impl NeuronRanking {
    pub fn len(&self) -> usize {
        self.ordered_neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordered_neurons.is_empty()
    }

    /// True when every candidate neuron is ranked.
    pub fn is_complete(&self) -> bool {
        self.ordered_neurons.len() == self.num_candidates
    }

    /// First `k` neurons.
    pub fn top(&self, k: usize) -> &[usize] {
        &self.ordered_neurons[..k.min(self.len())]
    }

    /// Last `k` neurons of a complete ranking.
    pub fn bottom(&self, k: usize) -> Result<&[usize]> {
        if !self.is_complete() {
            return Err(Error::InvalidN {
                requested: self.num_candidates,
                available: self.len(),
            });
        }
        Ok(&self.ordered_neurons[self.len() - k.min(self.len())..])
    }
}

/// Feature indices of `label` sorted by |weight| descending, ties by index.
fn sorted_features(model: &ProbeModel, label: usize) -> Vec<usize> {
    let w = model.label_weights(label);
    let mut order: Vec<usize> = (0..model.num_features).collect();
    order.sort_by(|&a, &b| {
        w[b].abs()
            .partial_cmp(&w[a].abs())
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// For every label, neuron ids sorted by |weight| descending, ties by index.
pub fn per_label_order(model: &ProbeModel) -> Vec<Vec<usize>> {
    let neurons = model.feature_neurons();
    (0..model.num_labels)
        .map(|t| {
            sorted_features(model, t)
                .into_iter()
                .map(|f| neurons[f])
                .collect()
        })
        .collect()
}

/// Running sums of |weight| along `order`; the last entry is the label's mass.
fn cumulative_mass(model: &ProbeModel, label: usize, order: &[usize]) -> Vec<f64> {
    let w = model.label_weights(label);
    order
        .iter()
        .scan(0.0, |acc, &f| {
            *acc += w[f].abs();
            Some(*acc)
        })
        .collect()
}

/// Length of the shortest prefix whose cumulative mass reaches `p * total`.
fn prefix_len(cum: &[f64], p: f64) -> usize {
    let total = *cum.last().unwrap_or(&0.0);
    let target = p * total;
    (cum.partition_point(|&c| c < target) + 1).min(cum.len())
}

/// Shortest prefix of label `label`'s order holding at least `p` of its
/// absolute weight mass.
pub fn label_mass_prefix(model: &ProbeModel, label: usize, p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "mass fraction {p} outside (0, 1]"
        )));
    }
    let order = sorted_features(model, label);
    let cum = cumulative_mass(model, label, &order);
    if cum.last().copied().unwrap_or(0.0) <= 0.0 {
        return Err(Error::ZeroMass(label));
    }
    let neurons = model.feature_neurons();
    Ok(order[..prefix_len(&cum, p)]
        .iter()
        .map(|&f| neurons[f])
        .collect())
}

/// Ranks the `n` most salient neurons with the default mass step.
pub fn select_top(model: &ProbeModel, n: usize) -> Result<NeuronRanking> {
    select_top_with_step(model, n, DEFAULT_P_STEP)
}

/// Ranks every neuron the probe reads.
pub fn full_ranking(model: &ProbeModel) -> Result<NeuronRanking> {
    select_top(model, model.num_features)
}

/// Ranks the `n` most salient neurons, growing the mass fraction by `p_step`.
///
/// Neurons are ordered by the step at which they first entered, then by their
/// largest |weight| over labels (descending), then by index. Neurons that
/// never enter (zero weight for every label) follow in index order.
pub fn select_top_with_step(model: &ProbeModel, n: usize, p_step: f64) -> Result<NeuronRanking> {
    let num_features = model.num_features;
    if n == 0 || n > num_features {
        return Err(Error::InvalidN {
            requested: n,
            available: num_features,
        });
    }
    if !(p_step > 0.0 && p_step <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "p_step {p_step} outside (0, 1]"
        )));
    }

    let orders: Vec<Vec<usize>> = (0..model.num_labels)
        .map(|t| sorted_features(model, t))
        .collect();
    let cums: Vec<Vec<f64>> = orders
        .iter()
        .enumerate()
        .map(|(t, o)| cumulative_mass(model, t, o))
        .collect();
    let active: Vec<usize> = (0..model.num_labels)
        .filter(|&t| {
            let has_mass = cums[t].last().copied().unwrap_or(0.0) > 0.0;
            if !has_mass {
                log::warn!("label {t} has zero weight mass and is skipped in the ranking");
            }
            has_mass
        })
        .collect();

    let max_abs: Vec<f64> = (0..num_features)
        .map(|f| {
            (0..model.num_labels)
                .map(|t| model.weight(t, f).abs())
                .fold(0.0, f64::max)
        })
        .collect();

    let mut first_step: Vec<Option<u64>> = vec![None; num_features];
    let mut entered: Vec<(u64, usize)> = Vec::new();
    let mut lengths = vec![0usize; model.num_labels];
    let mut step = 0u64;
    let mut p = 0.0;
    while entered.len() < n && p < 1.0 && !active.is_empty() {
        step += 1;
        p = (step as f64 * p_step).min(1.0);
        for &t in &active {
            let len = prefix_len(&cums[t], p);
            for &f in &orders[t][lengths[t]..len] {
                if first_step[f].is_none() {
                    first_step[f] = Some(step);
                    entered.push((step, f));
                }
            }
            lengths[t] = len;
        }
    }

    entered.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(
                max_abs[b.1]
                    .partial_cmp(&max_abs[a.1])
                    .unwrap_or(Ordering::Equal),
            )
            .then(a.1.cmp(&b.1))
    });
    let mut ranked: Vec<(usize, f64)> = entered
        .iter()
        .map(|&(s, f)| (f, (s as f64 * p_step).min(1.0)))
        .collect();
    if ranked.len() < n {
        let mut rest: Vec<usize> = (0..num_features)
            .filter(|&f| first_step[f].is_none())
            .collect();
        rest.sort_by(|&a, &b| {
            max_abs[b]
                .partial_cmp(&max_abs[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        ranked.extend(rest.into_iter().map(|f| (f, 1.0)));
    }
    ranked.truncate(n);

    // position[t][f] = rank of feature f in label t's order
    let positions: Vec<Vec<usize>> = orders
        .iter()
        .map(|o| {
            let mut pos = vec![0; num_features];
            for (i, &f) in o.iter().enumerate() {
                pos[f] = i;
            }
            pos
        })
        .collect();
    let neurons = model.feature_neurons();
    let attributed_labels = ranked
        .iter()
        .map(|&(f, _)| {
            active
                .iter()
                .copied()
                .filter(|&t| positions[t][f] < lengths[t])
                .collect()
        })
        .collect();

    Ok(NeuronRanking {
        ordered_neurons: ranked.iter().map(|&(f, _)| neurons[f]).collect(),
        inclusion_mass: ranked.iter().map(|&(_, m)| m).collect(),
        attributed_labels,
        per_label_order: orders
            .into_iter()
            .map(|o| o.into_iter().map(|f| neurons[f]).collect())
            .collect(),
        tagset: model.tagset.clone(),
        num_candidates: num_features,
        p_step,
    })
}

/// Number of ranked neurons attributed to each label. A neuron shared by
/// several labels counts once for each.
pub fn label_neuron_counts(ranking: &NeuronRanking) -> Vec<usize> {
    let mut counts = vec![0; ranking.tagset.len()];
    for labels in &ranking.attributed_labels {
        for &t in labels {
            counts[t] += 1;
        }
    }
    counts
}

#[derive(Debug, Serialize, Deserialize)]
struct RankingFile {
    ordered_neurons: Vec<usize>,
    inclusion_mass: Vec<f64>,
    attributed_labels: BTreeMap<usize, Vec<String>>,
    per_label_counts: BTreeMap<String, usize>,
    tagset: Vec<String>,
    num_candidates: usize,
    p_step: f64,
}

impl NeuronRanking {
    pub fn to_json(&self) -> String {
        let counts = label_neuron_counts(self);
        let file = RankingFile {
            ordered_neurons: self.ordered_neurons.clone(),
            inclusion_mass: self.inclusion_mass.clone(),
            attributed_labels: self
                .ordered_neurons
                .iter()
                .zip(&self.attributed_labels)
                .map(|(&n, ls)| (n, ls.iter().map(|&t| self.tagset[t].clone()).collect()))
                .collect(),
            per_label_counts: self.tagset.iter().cloned().zip(counts).collect(),
            tagset: self.tagset.clone(),
            num_candidates: self.num_candidates,
            p_step: self.p_step,
        };
        serde_json::to_string_pretty(&file).expect("ranking serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingRanking(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: RankingFile = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if file.inclusion_mass.len() != file.ordered_neurons.len() {
            return Err(Error::InvalidMeta(format!(
                "{}: inclusion_mass length differs from ordered_neurons",
                path.display()
            )));
        }
        let ids: BTreeMap<&str, usize> = file
            .tagset
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        let attributed_labels = file
            .ordered_neurons
            .iter()
            .map(|n| {
                file.attributed_labels
                    .get(n)
                    .map(|labels| {
                        labels
                            .iter()
                            .map(|l| {
                                ids.get(l.as_str()).copied().ok_or_else(|| {
                                    Error::InvalidMeta(format!("unknown label `{l}` in ranking"))
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .unwrap_or_else(|| Ok(Vec::new()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NeuronRanking {
            ordered_neurons: file.ordered_neurons,
            inclusion_mass: file.inclusion_mass,
            attributed_labels,
            per_label_order: Vec::new(),
            tagset: file.tagset,
            num_candidates: file.num_candidates,
            p_step: file.p_step,
        })
    }
}
