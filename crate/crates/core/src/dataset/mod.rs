// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token-aligned activation datasets, label columns and control tasks.
//!
//! A dataset is a dense `N x D` matrix of `f32` activations, one row per word
//! position, with a layer map that partitions the `D` neuron indices into the
//! per-layer ranges of the underlying model. Label columns attach one tag per
//! row for a given task.

mod control;
mod io;

pub use control::{control_task, empirical_distribution, generate_control, ControlMapping};
pub use io::{
    load_dataset, load_splits, read_layers, split_paths, write_control, write_dataset,
    DatasetSplits, Split, SplitPaths,
};

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Identity of one word position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub sentence_id: u64,
    pub token_index: u64,
    pub surface: String,
}

/// A contiguous block of neuron indices `[start, end)` belonging to one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(name: impl Into<String>, start: usize, end: usize) -> Self {
        Self {
            name: name.into(),
            start,
            end,
        }
    }

    pub fn contains(&self, neuron: usize) -> bool {
        (self.start..self.end).contains(&neuron)
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Checks that `layers` are sorted, disjoint and cover exactly `[0, num_neurons)`.
pub fn validate_layer_map(layers: &[LayerRange], num_neurons: usize) -> Result<()> {
    let gap = |detail: String| Error::LayerMapGap {
        num_neurons,
        detail,
    };
    if layers.is_empty() {
        return Err(gap("no layers declared".into()));
    }
    let mut cursor = 0;
    for layer in layers {
        if layer.start >= layer.end {
            return Err(gap(format!(
                "layer `{}` has empty range [{}, {})",
                layer.name, layer.start, layer.end
            )));
        }
        if layer.start != cursor {
            return Err(gap(format!(
                "layer `{}` starts at {} but previous coverage ends at {}",
                layer.name, layer.start, cursor
            )));
        }
        cursor = layer.end;
    }
    if cursor != num_neurons {
        return Err(gap(format!("coverage ends at {cursor}")));
    }
    Ok(())
}

/// Index of the layer holding `neuron`, if any.
pub fn layer_of(layers: &[LayerRange], neuron: usize) -> Option<usize> {
    let idx = layers.partition_point(|l| l.end <= neuron);
    layers.get(idx).filter(|l| l.contains(neuron)).map(|_| idx)
}

/// Dense activation matrix with token identities and a layer map.
///
/// Immutable once constructed; every constructor validates the invariants.
#[derive(Debug, Clone)]
pub struct ActivationDataset {
    num_tokens: usize,
    num_neurons: usize,
    activations: Vec<f32>,
    tokens: Vec<TokenRecord>,
    layers: Vec<LayerRange>,
    fingerprint: OnceLock<String>,
}

impl PartialEq for ActivationDataset {
    fn eq(&self, other: &Self) -> bool {
        self.num_neurons == other.num_neurons
            && self.layers == other.layers
            && self.tokens == other.tokens
            && self.activations == other.activations
    }
}

impl ActivationDataset {
    /// Builds a dataset from row-major activations and validates it.
    pub fn new(
        num_neurons: usize,
        activations: Vec<f32>,
        tokens: Vec<TokenRecord>,
        layers: Vec<LayerRange>,
    ) -> Result<Self> {
        let num_tokens = tokens.len();
        if num_tokens == 0 {
            return Err(Error::InvalidTokens("dataset has no tokens".into()));
        }
        if num_neurons == 0 {
            return Err(Error::InvalidMeta("num_neurons must be at least 1".into()));
        }
        let expected = num_tokens * num_neurons;
        if activations.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: activations.len(),
            });
        }
        validate_layer_map(&layers, num_neurons)?;
        if let Some(pos) = activations.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: pos / num_neurons,
                column: pos % num_neurons,
            });
        }
        validate_tokens(&tokens)?;
        Ok(Self {
            num_tokens,
            num_neurons,
            activations,
            tokens,
            layers,
            fingerprint: OnceLock::new(),
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_neurons(&self) -> usize {
        self.num_neurons
    }

    pub fn row(&self, index: usize) -> &[f32] {
        let start = index * self.num_neurons;
        &self.activations[start..start + self.num_neurons]
    }

    pub fn activations(&self) -> &[f32] {
        &self.activations
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub fn layers(&self) -> &[LayerRange] {
        &self.layers
    }

    /// Distinct surface strings (word types), case-sensitive.
    pub fn vocabulary(&self) -> BTreeSet<String> {
        self.tokens.iter().map(|t| t.surface.clone()).collect()
    }

    /// SHA-256 over shape, layer map and raw activation bytes (hex, 16 bytes).
    pub fn fingerprint(&self) -> &str {
        self.fingerprint.get_or_init(|| self.compute_fingerprint())
    }

    fn compute_fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.num_tokens as u64).to_le_bytes());
        hasher.update((self.num_neurons as u64).to_le_bytes());
        for layer in &self.layers {
            hasher.update(layer.name.as_bytes());
            hasher.update((layer.start as u64).to_le_bytes());
            hasher.update((layer.end as u64).to_le_bytes());
        }
        for v in &self.activations {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..16])
    }

    /// A copy holding only `columns`, in the given order.
    ///
    /// The layer map of the result is a single range named `subset`.
    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        check_subset(columns, self.num_neurons)?;
        let mut activations = Vec::with_capacity(self.num_tokens * columns.len());
        for r in 0..self.num_tokens {
            let row = self.row(r);
            activations.extend(columns.iter().map(|&c| row[c]));
        }
        Self::new(
            columns.len(),
            activations,
            self.tokens.clone(),
            vec![LayerRange::new("subset", 0, columns.len())],
        )
    }
}

/// Validates that `subset` is non-empty, in range and free of duplicates.
pub(crate) fn check_subset(subset: &[usize], num_neurons: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    check_indices(subset, num_neurons)
}

/// Like [`check_subset`] but an empty list is allowed.
pub(crate) fn check_indices(indices: &[usize], num_neurons: usize) -> Result<()> {
    let mut seen = HashSet::with_capacity(indices.len());
    for &i in indices {
        if i >= num_neurons {
            return Err(Error::IndexOutOfRange {
                index: i,
                num_neurons,
            });
        }
        if !seen.insert(i) {
            return Err(Error::DuplicateIndex(i));
        }
    }
    Ok(())
}

fn validate_tokens(tokens: &[TokenRecord]) -> Result<()> {
    let mut per_sentence: HashMap<u64, Vec<u64>> = HashMap::new();
    for t in tokens {
        per_sentence
            .entry(t.sentence_id)
            .or_default()
            .push(t.token_index);
    }
    for (sentence, mut indices) in per_sentence {
        indices.sort_unstable();
        for (expected, &found) in indices.iter().enumerate() {
            if found != expected as u64 {
                return Err(Error::InvalidTokens(format!(
                    "sentence {sentence}: token indices must be unique and contiguous from 0 \
                     (expected {expected}, found {found})"
                )));
            }
        }
    }
    Ok(())
}

/// One tag per dataset row for a single task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelColumn {
    pub task_name: String,
    pub labels: Vec<usize>,
    pub tagset: Vec<String>,
}

impl LabelColumn {
    /// Builds a column and checks ids and tagset.
    pub fn new(
        task_name: impl Into<String>,
        labels: Vec<usize>,
        tagset: Vec<String>,
    ) -> Result<Self> {
        let task_name = task_name.into();
        let invalid = |detail: String| Error::InvalidLabels {
            task: task_name.clone(),
            detail,
        };
        let mut seen = HashSet::new();
        for tag in &tagset {
            if tag.is_empty() {
                return Err(invalid("empty tag string".into()));
            }
            if !seen.insert(tag.as_str()) {
                return Err(invalid(format!("duplicate tag `{tag}`")));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= tagset.len()) {
            return Err(invalid(format!(
                "label id {bad} outside tagset of size {}",
                tagset.len()
            )));
        }
        Ok(Self {
            task_name,
            labels,
            tagset,
        })
    }

    /// Builds a column from label strings; the tagset is the sorted distinct set.
    pub fn from_strings<S: AsRef<str>>(
        task_name: impl Into<String>,
        strings: &[S],
    ) -> Result<Self> {
        let tagset: Vec<String> = strings
            .iter()
            .map(|s| s.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::with_tagset(task_name, strings, tagset)
    }

    /// Builds a column from label strings against a fixed tagset order.
    pub fn with_tagset<S: AsRef<str>>(
        task_name: impl Into<String>,
        strings: &[S],
        tagset: Vec<String>,
    ) -> Result<Self> {
        let task_name = task_name.into();
        let index: HashMap<&str, usize> = tagset
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        let labels = strings
            .iter()
            .map(|s| {
                index
                    .get(s.as_ref())
                    .copied()
                    .ok_or_else(|| Error::InvalidLabels {
                        task: task_name.clone(),
                        detail: format!("label `{}` not in tagset", s.as_ref()),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(task_name, labels, tagset)
    }

    pub fn num_labels(&self) -> usize {
        self.tagset.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Checks this column is aligned with `dataset`.
    pub fn check_aligned(&self, dataset: &ActivationDataset) -> Result<()> {
        if self.labels.len() != dataset.num_tokens() {
            return Err(Error::LabelAlignmentError {
                task: self.task_name.clone(),
                expected: dataset.num_tokens(),
                found: self.labels.len(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: usize) -> Vec<TokenRecord> {
        (0..n)
            .map(|i| TokenRecord {
                sentence_id: 0,
                token_index: i as u64,
                surface: format!("w{i}"),
            })
            .collect()
    }

    #[test]
    fn layer_gap_detected() {
        let layers = vec![LayerRange::new("l0", 0, 2), LayerRange::new("l1", 3, 5)];
        assert!(matches!(
            validate_layer_map(&layers, 5),
            Err(Error::LayerMapGap { .. })
        ));
    }

    #[test]
    fn layer_overlap_and_short_cover_detected() {
        let overlap = vec![LayerRange::new("a", 0, 3), LayerRange::new("b", 2, 5)];
        assert!(validate_layer_map(&overlap, 5).is_err());
        let short = vec![LayerRange::new("a", 0, 4)];
        assert!(validate_layer_map(&short, 5).is_err());
        let ok = vec![LayerRange::new("a", 0, 2), LayerRange::new("b", 2, 5)];
        assert!(validate_layer_map(&ok, 5).is_ok());
    }

    #[test]
    fn layer_lookup() {
        let layers = vec![LayerRange::new("a", 0, 2), LayerRange::new("b", 2, 5)];
        assert_eq!(layer_of(&layers, 0), Some(0));
        assert_eq!(layer_of(&layers, 2), Some(1));
        assert_eq!(layer_of(&layers, 4), Some(1));
        assert_eq!(layer_of(&layers, 5), None);
    }

    #[test]
    fn non_finite_rejected() {
        let err = ActivationDataset::new(
            2,
            vec![0.0, 1.0, f32::NAN, 2.0],
            tokens(2),
            vec![LayerRange::new("l", 0, 2)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { row: 1, column: 0 }));
    }

    #[test]
    fn token_indices_must_be_contiguous() {
        let mut t = tokens(3);
        t[2].token_index = 5;
        let err = ActivationDataset::new(1, vec![0.0; 3], t, vec![LayerRange::new("l", 0, 1)])
            .unwrap_err();
        assert!(matches!(err, Error::InvalidTokens(_)));

        let mut dup = tokens(2);
        dup[1].token_index = 0;
        assert!(
            ActivationDataset::new(1, vec![0.0; 2], dup, vec![LayerRange::new("l", 0, 1)]).is_err()
        );
    }

    #[test]
    fn select_columns_reorders() {
        let ds = ActivationDataset::new(
            3,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            tokens(2),
            vec![LayerRange::new("l", 0, 3)],
        )
        .unwrap();
        let sub = ds.select_columns(&[2, 0]).unwrap();
        assert_eq!(sub.row(0), &[3.0, 1.0]);
        assert_eq!(sub.row(1), &[6.0, 4.0]);
        assert!(matches!(ds.select_columns(&[]), Err(Error::EmptySubset)));
        assert!(matches!(
            ds.select_columns(&[3]),
            Err(Error::IndexOutOfRange { index: 3, .. })
        ));
        assert!(matches!(
            ds.select_columns(&[1, 1]),
            Err(Error::DuplicateIndex(1))
        ));
    }

    #[test]
    fn label_column_rules() {
        let col = LabelColumn::from_strings("pos", &["NN", "DT", "NN"]).unwrap();
        assert_eq!(col.tagset, vec!["DT", "NN"]);
        assert_eq!(col.labels, vec![1, 0, 1]);
        assert!(LabelColumn::new("pos", vec![2], vec!["a".into(), "b".into()]).is_err());
        assert!(LabelColumn::new("pos", vec![0], vec!["a".into(), "a".into()]).is_err());
        assert!(LabelColumn::new("pos", vec![0], vec!["".into()]).is_err());
        assert!(LabelColumn::with_tagset("pos", &["X"], vec!["A".into()]).is_err());
    }
}
