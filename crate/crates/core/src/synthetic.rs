// SPDX-License-Identifier: MIT OR Apache-2.0

//! Planted-signal corpora for demos and tests.
//!
//! Every token gets a word type and a gold label. A chosen set of informative
//! neurons carries the label: informative neuron `i` belongs to label
//! `i % num_labels` and is shifted by `signal` when the token has that label.
//! All other neurons are Gaussian noise plus an optional per-type lexical
//! vector, which lets a probe memorize word types. A fraction of the word
//! types always carry the same label, so part of the label signal can also be
//! read off the type.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{
    write_dataset, ActivationDataset, DatasetSplits, LabelColumn, LayerRange, Split, TokenRecord,
};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub task: String,
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub num_neurons: usize,
    pub num_labels: usize,
    pub layers: Vec<LayerRange>,
    pub informative: Vec<usize>,
    /// Mean shift of an informative neuron for its own label.
    pub signal: f64,
    pub noise: f64,
    pub vocab_size: usize,
    /// Fraction of word types whose tokens always carry the type's label.
    pub memorizable_fraction: f64,
    /// Standard deviation of the per-type lexical vector on non-informative neurons.
    pub lexical_scale: f64,
    pub sentence_len: usize,
    pub seed: u64,
}

impl PlantedConfig {
    /// 5000/1000/1000 tokens, 200 neurons in four layers of 50, four labels,
    /// 20 informative neurons spread evenly over the index range.
    pub fn standard(seed: u64) -> Self {
        Self {
            task: "tag".into(),
            num_train: 5000,
            num_dev: 1000,
            num_test: 1000,
            num_neurons: 200,
            num_labels: 4,
            layers: (0..4)
                .map(|l| LayerRange::new(format!("layer{l}"), l * 50, (l + 1) * 50))
                .collect(),
            informative: (0..20).map(|i| i * 10 + 3).collect(),
            signal: 1.5,
            noise: 1.0,
            vocab_size: 400,
            memorizable_fraction: 0.0,
            lexical_scale: 0.0,
            sentence_len: 10,
            seed,
        }
    }

    /// [`PlantedConfig::standard`] over a 50-type vocabulary where 30% of the
    /// types fix their label and every type carries a lexical vector, so a
    /// probe over all neurons can memorize word types.
    pub fn memorizable(seed: u64) -> Self {
        Self {
            vocab_size: 50,
            memorizable_fraction: 0.3,
            lexical_scale: 1.0,
            ..Self::standard(seed)
        }
    }
}

struct Generator<'a> {
    config: &'a PlantedConfig,
    owner: Vec<Option<usize>>,
    lexical: Vec<Vec<f32>>,
    fixed_label: Vec<Option<usize>>,
}

impl<'a> Generator<'a> {
    fn new(config: &'a PlantedConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut owner = vec![None; config.num_neurons];
        for (i, &n) in config.informative.iter().enumerate() {
            owner[n] = Some(i % config.num_labels);
        }
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let lexical = (0..config.vocab_size)
            .map(|_| {
                (0..config.num_neurons)
                    .map(|n| {
                        if owner[n].is_some() {
                            0.0
                        } else {
                            (config.lexical_scale * unit.sample(rng)) as f32
                        }
                    })
                    .collect()
            })
            .collect();
        let fixed_types = (config.memorizable_fraction * config.vocab_size as f64).round() as usize;
        let mut types: Vec<usize> = (0..config.vocab_size).collect();
        types.shuffle(rng);
        let mut fixed_label = vec![None; config.vocab_size];
        for &w in types.iter().take(fixed_types) {
            fixed_label[w] = Some(rng.random_range(0..config.num_labels));
        }
        Self {
            config,
            owner,
            lexical,
            fixed_label,
        }
    }

    fn split(&self, rows: usize, rng: &mut ChaCha8Rng) -> Result<Split> {
        let c = self.config;
        let noise = Normal::new(0.0, c.noise).expect("noise scale");
        let mut activations = Vec::with_capacity(rows * c.num_neurons);
        let mut tokens = Vec::with_capacity(rows);
        let mut labels = Vec::with_capacity(rows);
        for r in 0..rows {
            let word = rng.random_range(0..c.vocab_size);
            let label = self.fixed_label[word].unwrap_or_else(|| rng.random_range(0..c.num_labels));
            for n in 0..c.num_neurons {
                let mut v = noise.sample(rng) + f64::from(self.lexical[word][n]);
                if self.owner[n] == Some(label) {
                    v += c.signal;
                }
                activations.push(v as f32);
            }
            tokens.push(TokenRecord {
                sentence_id: (r / c.sentence_len) as u64,
                token_index: (r % c.sentence_len) as u64,
                surface: format!("w{word}"),
            });
            labels.push(label);
        }
        let dataset = ActivationDataset::new(c.num_neurons, activations, tokens, c.layers.clone())?;
        let tagset = (0..c.num_labels).map(|t| format!("L{t}")).collect();
        let column = LabelColumn::new(c.task.clone(), labels, tagset)?;
        Ok(Split {
            dataset,
            columns: vec![column],
        })
    }
}

/// Generates train, dev and test splits.
pub fn planted_splits(config: &PlantedConfig) -> Result<DatasetSplits> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let generator = Generator::new(config, &mut rng);
    let train = generator.split(config.num_train, &mut rng)?;
    let dev = generator.split(config.num_dev, &mut rng)?;
    let test = generator.split(config.num_test, &mut rng)?;
    DatasetSplits::new(train, dev, test)
}

/// Writes `splits` as `root/{train,dev,test}` dataset directories.
pub fn write_splits(root: impl AsRef<std::path::Path>, splits: &DatasetSplits) -> Result<()> {
    let root = root.as_ref();
    for (name, split) in splits.splits() {
        write_dataset(root.join(name), &split.dataset, &split.columns)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let mut config = PlantedConfig::standard(1);
        config.num_train = 50;
        config.num_dev = 20;
        config.num_test = 20;
        let a = planted_splits(&config).unwrap();
        let b = planted_splits(&config).unwrap();
        assert_eq!(a.train.dataset, b.train.dataset);
        assert_eq!(a.train.dataset.num_tokens(), 50);
        assert_eq!(a.test.dataset.num_neurons(), 200);
        assert_eq!(a.dev.columns[0].num_labels(), 4);
    }

    #[test]
    fn memorizable_types_keep_their_label() {
        let mut config = PlantedConfig::standard(2);
        config.num_train = 2000;
        config.vocab_size = 20;
        config.memorizable_fraction = 1.0;
        let splits = planted_splits(&config).unwrap();
        let mut seen = std::collections::HashMap::new();
        for (t, &l) in splits
            .train
            .dataset
            .tokens()
            .iter()
            .zip(&splits.train.columns[0].labels)
        {
            assert_eq!(*seen.entry(t.surface.clone()).or_insert(l), l);
        }
    }
}
