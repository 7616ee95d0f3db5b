// SPDX-License-Identifier: MIT OR Apache-2.0

//! Grid search over the elastic-net strengths `(lambda1, lambda2)`.
//!
//! Each grid point trains a probe, ranks its neurons, and scores
//!
//! ```text
//! S = alpha * (A_t - A_b) - beta * (A_z - A_l)
//! ```
//!
//! where `A_t` / `A_b` are accuracies keeping only the top / bottom fraction of
//! ranked neurons, `A_l` is the probe's accuracy and `A_z` the accuracy of an
//! unregularized probe. All accuracies are measured on the development split.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ActivationDataset, LabelColumn};
use crate::error::{Error, Result};
use crate::probe::{evaluate, evaluate_ablated, train, TrainConfig};
use crate::ranking::full_ranking;

pub const DEFAULT_ABLATION_FRACTION: f64 = 0.2;
pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 0.5;

/// A dataset paired with the labels of one task.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub dataset: &'a ActivationDataset,
    pub labels: &'a LabelColumn,
}

impl<'a> TaskData<'a> {
    pub fn new(dataset: &'a ActivationDataset, labels: &'a LabelColumn) -> Self {
        Self { dataset, labels }
    }
}

/// Number of neurons making up `fraction` of `total`, rounded up.
pub fn fraction_count(fraction: f64, total: usize) -> usize {
    // Guard against 0.2 * 200 = 40.000000000000004 style round-up.
    let raw = fraction * total as f64;
    ((raw - 1e-9).ceil().max(1.0) as usize).min(total)
}

/// `alpha * (A_t - A_b) - beta * (A_z - A_l)`.
pub fn score(a_t: f64, a_b: f64, a_z: f64, a_l: f64, alpha: f64, beta: f64) -> f64 {
    alpha * (a_t - a_b) - beta * (a_z - a_l)
}

/// `{0, 1e-7, ..., 1e-1}` squared: 64 points.
pub fn default_grid() -> Vec<(f64, f64)> {
    let values = [0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];
    values
        .iter()
        .flat_map(|&l1| values.iter().map(move |&l2| (l1, l2)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    pub ablation_fraction: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Evaluate grid points on the rayon pool. Results are identical either way.
    #[serde(skip)]
    pub parallel: bool,
}

impl Default for SearchSettings {
    fn default() -> Self {
        Self {
            ablation_fraction: DEFAULT_ABLATION_FRACTION,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            parallel: false,
        }
    }
}

/// One evaluated grid point. Failed points carry `error` and no score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(rename = "A_t")]
    pub top_accuracy: Option<f64>,
    #[serde(rename = "A_b")]
    pub bottom_accuracy: Option<f64>,
    #[serde(rename = "A_z")]
    pub unregularized_accuracy: f64,
    #[serde(rename = "A_l")]
    pub accuracy: Option<f64>,
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl GridPoint {
    /// The score, with failed points at negative infinity.
    pub fn score_value(&self) -> f64 {
        self.score.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub grid: Vec<GridPoint>,
    pub winner: Lambdas,
    pub winner_score: f64,
    pub ablation_fraction: f64,
    pub alpha: f64,
    pub beta: f64,
    pub num_ablation_neurons: usize,
    pub split: String,
}

/// Highest score; equal scores go to the smaller `(lambda1, lambda2)`.
fn pick_winner(grid: &[GridPoint]) -> Option<&GridPoint> {
    grid.iter()
        .filter(|p| p.score.is_some())
        .fold(None, |best, p| match best {
            None => Some(p),
            Some(b) => {
                let better = p.score_value() > b.score_value()
                    || (p.score_value() == b.score_value()
                        && (p.lambda1, p.lambda2) < (b.lambda1, b.lambda2));
                Some(if better { p } else { b })
            }
        })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_point(
    train_data: TaskData<'_>,
    dev: TaskData<'_>,
    config: &TrainConfig,
    settings: &SearchSettings,
    k: usize,
    a_z: f64,
    lambda1: f64,
    lambda2: f64,
) -> GridPoint {
    let run = || -> Result<(f64, f64, f64)> {
        let model = train(
            train_data.dataset,
            train_data.labels,
            config,
            lambda1,
            lambda2,
            None,
        )?;
        let a_l = evaluate(&model, dev.dataset, dev.labels)?;
        let ranking = full_ranking(&model)?;
        let a_t = evaluate_ablated(&model, dev.dataset, dev.labels, ranking.top(k))?;
        let a_b = evaluate_ablated(&model, dev.dataset, dev.labels, ranking.bottom(k)?)?;
        Ok((a_t, a_b, a_l))
    };
    match run() {
        Ok((a_t, a_b, a_l)) => GridPoint {
            lambda1,
            lambda2,
            top_accuracy: Some(a_t),
            bottom_accuracy: Some(a_b),
            unregularized_accuracy: a_z,
            accuracy: Some(a_l),
            score: Some(score(a_t, a_b, a_z, a_l, settings.alpha, settings.beta)),
            error: None,
        },
        Err(e) => {
            log::warn!("grid point ({lambda1}, {lambda2}) failed: {e}");
            GridPoint {
                lambda1,
                lambda2,
                top_accuracy: None,
                bottom_accuracy: None,
                unregularized_accuracy: a_z,
                accuracy: None,
                score: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Trains and scores a probe for every `(lambda1, lambda2)` in `grid`.
pub fn grid_search(
    train_data: TaskData<'_>,
    dev: TaskData<'_>,
    grid: &[(f64, f64)],
    config: &TrainConfig,
    settings: &SearchSettings,
) -> Result<SearchResult> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("lambda grid is empty".into()));
    }
    if !(settings.ablation_fraction > 0.0 && settings.ablation_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "ablation fraction {} outside (0, 1)",
            settings.ablation_fraction
        )));
    }
    let k = fraction_count(settings.ablation_fraction, train_data.dataset.num_neurons());

    let unregularized = train(
        train_data.dataset,
        train_data.labels,
        config,
        0.0,
        0.0,
        None,
    )?;
    let a_z = evaluate(&unregularized, dev.dataset, dev.labels)?;

    let point = |&(l1, l2): &(f64, f64)| {
        log::debug!("grid point lambda1={l1} lambda2={l2}");
        evaluate_point(train_data, dev, config, settings, k, a_z, l1, l2)
    };
    let points: Vec<GridPoint> = if settings.parallel {
        grid.par_iter().map(point).collect()
    } else {
        grid.iter().map(point).collect()
    };

    let winner = pick_winner(&points).ok_or(Error::NoViablePoint)?;
    Ok(SearchResult {
        winner: Lambdas {
            lambda1: winner.lambda1,
            lambda2: winner.lambda2,
        },
        winner_score: winner.score_value(),
        grid: points.clone(),
        ablation_fraction: settings.ablation_fraction,
        alpha: settings.alpha,
        beta: settings.beta,
        num_ablation_neurons: k,
        split: "dev".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{planted_splits, PlantedConfig};

    fn point(l1: f64, l2: f64, score: Option<f64>) -> GridPoint {
        GridPoint {
            lambda1: l1,
            lambda2: l2,
            top_accuracy: None,
            bottom_accuracy: None,
            unregularized_accuracy: 0.0,
            accuracy: None,
            score,
            error: None,
        }
    }

    #[test]
    fn score_examples() {
        let s = score(0.9016, 0.1686, 0.9604, 0.9604, 0.5, 0.5);
        assert!((s - 0.3665).abs() < 1e-12);
        assert_eq!(score(0.4, 0.4, 0.8, 0.8, 0.5, 0.5), 0.0);
        assert!((score(0.3, 0.1, 0.9, 0.8, 0.0, 1.0) + 0.1).abs() < 1e-12);
    }

    #[test]
    fn score_terms_antisymmetric() {
        for (t, b) in [(0.7, 0.2), (0.9016, 0.1686), (0.33, 0.91)] {
            assert_eq!(
                score(t, b, 0.9, 0.9, 0.5, 0.5),
                -score(b, t, 0.9, 0.9, 0.5, 0.5)
            );
        }
    }

    #[test]
    fn default_grid_contents() {
        let grid = default_grid();
        assert_eq!(grid.len(), 64);
        assert!(grid.contains(&(0.001, 0.01)));
        assert!(grid.contains(&(1e-5, 1e-6)));
        assert!(grid.contains(&(0.0, 0.0)));
    }

    #[test]
    fn fraction_counts() {
        assert_eq!(fraction_count(0.2, 200), 40);
        assert_eq!(fraction_count(0.2, 9984), 1997);
        assert_eq!(fraction_count(0.01, 50), 1);
        assert_eq!(fraction_count(1.0, 7), 7);
    }

    #[test]
    fn tie_goes_to_smaller_lambdas() {
        let grid = vec![
            point(1e-3, 0.0, Some(0.4)),
            point(1e-4, 1e-2, Some(0.4)),
            point(1e-4, 1e-3, Some(0.4)),
            point(0.0, 0.0, None),
            point(1e-1, 0.0, Some(0.1)),
        ];
        let w = pick_winner(&grid).unwrap();
        assert_eq!((w.lambda1, w.lambda2), (1e-4, 1e-3));
        let mut reversed = grid.clone();
        reversed.reverse();
        let w2 = pick_winner(&reversed).unwrap();
        assert_eq!((w2.lambda1, w2.lambda2), (1e-4, 1e-3));
        assert!(pick_winner(&[point(0.0, 0.0, None)]).is_none());
    }

    fn small_planted() -> crate::dataset::DatasetSplits {
        let mut config = PlantedConfig::standard(21);
        config.num_train = 1500;
        config.num_dev = 500;
        config.num_test = 500;
        config.num_neurons = 60;
        config.layers = vec![crate::dataset::LayerRange::new("layer0", 0, 60)];
        config.informative = (0..8).map(|i| i * 7).collect();
        config.signal = 1.5;
        planted_splits(&config).unwrap()
    }

    #[test]
    fn single_point_wins() {
        let s = small_planted();
        let train_data = TaskData::new(&s.train.dataset, &s.train.columns[0]);
        let dev = TaskData::new(&s.dev.dataset, &s.dev.columns[0]);
        let r = grid_search(
            train_data,
            dev,
            &[(1e-3, 1e-2)],
            &TrainConfig::default(),
            &SearchSettings::default(),
        )
        .unwrap();
        assert_eq!(
            r.winner,
            Lambdas {
                lambda1: 1e-3,
                lambda2: 1e-2
            }
        );
        assert_eq!(r.num_ablation_neurons, 12);
        assert!(grid_search(
            train_data,
            dev,
            &[],
            &TrainConfig::default(),
            &SearchSettings::default()
        )
        .is_err());
    }

    #[test]
    fn search_invariants() {
        let s = small_planted();
        let train_data = TaskData::new(&s.train.dataset, &s.train.columns[0]);
        let dev = TaskData::new(&s.dev.dataset, &s.dev.columns[0]);
        let grid = vec![(1e-2, 0.0), (0.0, 0.0), (1e-3, 1e-3), (0.0, 1e-2)];
        let config = TrainConfig::default().with_seed(5);
        let serial =
            grid_search(train_data, dev, &grid, &config, &SearchSettings::default()).unwrap();

        // A_z equals A_l at (0, 0) bit for bit and is shared by all rows.
        let zero = serial
            .grid
            .iter()
            .find(|p| p.lambda1 == 0.0 && p.lambda2 == 0.0)
            .unwrap();
        assert_eq!(
            zero.accuracy.unwrap().to_bits(),
            zero.unregularized_accuracy.to_bits()
        );
        assert!(serial
            .grid
            .iter()
            .all(|p| p.unregularized_accuracy == zero.unregularized_accuracy));

        let best = serial
            .grid
            .iter()
            .map(GridPoint::score_value)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(serial.winner_score, best);

        let parallel_settings = SearchSettings {
            parallel: true,
            ..SearchSettings::default()
        };
        let parallel = grid_search(train_data, dev, &grid, &config, &parallel_settings).unwrap();
        assert_eq!(serial, parallel);

        let mut shuffled = grid.clone();
        shuffled.rotate_left(2);
        let permuted = grid_search(
            train_data,
            dev,
            &shuffled,
            &config,
            &SearchSettings::default(),
        )
        .unwrap();
        assert_eq!(permuted.winner, serial.winner);
    }

    #[test]
    fn failed_point_is_recorded_not_fatal() {
        let s = small_planted();
        let train_data = TaskData::new(&s.train.dataset, &s.train.columns[0]);
        let dev = TaskData::new(&s.dev.dataset, &s.dev.columns[0]);
        let grid = vec![(1e-3, 0.0), (-1.0, 0.0)];
        let r = grid_search(
            train_data,
            dev,
            &grid,
            &TrainConfig::default(),
            &SearchSettings::default(),
        )
        .unwrap();
        assert!(r.grid[1].score.is_none());
        assert!(r.grid[1].error.is_some());
        assert_eq!(r.winner.lambda1, 1e-3);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"score\":null"));
    }
}
