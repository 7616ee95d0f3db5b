// SPDX-License-Identifier: MIT OR Apache-2.0

//! Control tasks: every word type gets one fixed random label drawn from the
//! empirical label distribution of the real task's training split.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ActivationDataset, DatasetSplits, LabelColumn};
use crate::error::{Error, Result};

/// Label frequencies `count(t) / N` over a column.
pub fn empirical_distribution(labels: &LabelColumn) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::InvalidLabels {
            task: labels.task_name.clone(),
            detail: "empty label column".into(),
        });
    }
    let mut counts = vec![0usize; labels.num_labels()];
    for &l in &labels.labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Type-to-label assignment of a control task.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlMapping {
    pub task_name: String,
    pub seed: u64,
    pub mapping: BTreeMap<String, usize>,
    pub source_distribution: Vec<f64>,
    pub tagset: Vec<String>,
}

impl ControlMapping {
    pub fn label_of(&self, word_type: &str) -> Option<usize> {
        self.mapping.get(word_type).copied()
    }

    /// Control column for `dataset`: each token takes the label of its type.
    pub fn column(&self, dataset: &ActivationDataset) -> Result<LabelColumn> {
        let labels = dataset
            .tokens()
            .iter()
            .map(|t| {
                self.label_of(&t.surface)
                    .ok_or_else(|| Error::InvalidLabels {
                        task: self.control_task_name(),
                        detail: format!(
                            "word type {:?} missing from control vocabulary",
                            t.surface
                        ),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        LabelColumn::new(self.control_task_name(), labels, self.tagset.clone())
    }

    pub fn control_task_name(&self) -> String {
        format!("{}.control", self.task_name)
    }
}

/// Draws one control label per word type of `vocabulary`.
///
/// Types are visited in sorted order with a ChaCha8 stream seeded by `seed`,
/// so the mapping depends only on the vocabulary, the train distribution and
/// the seed.
pub fn generate_control(
    train_labels: &LabelColumn,
    vocabulary: &BTreeSet<String>,
    seed: u64,
) -> Result<ControlMapping> {
    if train_labels.num_labels() < 2 {
        return Err(Error::DegenerateTagset(train_labels.num_labels()));
    }
    if vocabulary.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let source_distribution = empirical_distribution(train_labels)?;
    let sampler = WeightedIndex::new(&source_distribution)
        .map_err(|e| Error::InvalidConfig(format!("label distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mapping = vocabulary
        .iter()
        .map(|w| (w.clone(), sampler.sample(&mut rng)))
        .collect();
    Ok(ControlMapping {
        task_name: train_labels.task_name.clone(),
        seed,
        mapping,
        source_distribution,
        tagset: train_labels.tagset.clone(),
    })
}

/// Builds the control task for `task` over all splits.
///
/// Returns the mapping and the control columns for train, dev and test.
pub fn control_task(
    splits: &DatasetSplits,
    task: &str,
    seed: u64,
) -> Result<(ControlMapping, [LabelColumn; 3])> {
    let mapping = generate_control(splits.train.column(task)?, &splits.vocabulary(), seed)?;
    let columns = [
        mapping.column(&splits.train.dataset)?,
        mapping.column(&splits.dev.dataset)?,
        mapping.column(&splits.test.dataset)?,
    ];
    Ok((mapping, columns))
}
