// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::TrainConfig;
use crate::search::{default_grid, DEFAULT_ABLATION_FRACTION};

pub const DEFAULT_DELTA: f64 = 0.5;
pub const DEFAULT_ABLATION_RUNS: usize = 3;

/// Split used to measure oracle, ablation and selection accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Dev,
    #[default]
    Test,
}

impl EvalSplit {
    pub fn name(self) -> &'static str {
        match self {
            EvalSplit::Dev => "dev",
            EvalSplit::Test => "test",
        }
    }
}

/// Everything a pipeline run depends on. Loadable from JSON; missing fields
/// take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub task: String,
    pub seed: u64,
    /// Optimizer settings. `train.seed` is replaced by `seed` at run time.
    pub train: TrainConfig,
    /// Pinned `(lambda1, lambda2)`; skips the grid search.
    pub lambdas: Option<(f64, f64)>,
    /// Grid for the search. `None` means the default 8x8 grid.
    pub grid: Option<Vec<(f64, f64)>>,
    pub delta: f64,
    pub ablation_fraction: f64,
    pub ablation_runs: usize,
    pub eval_split: EvalSplit,
    /// Worker threads for the grid search. 1 runs serially.
    pub threads: usize,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_root: PathBuf::from("data"),
            task: String::new(),
            seed: 0,
            train: TrainConfig::default(),
            lambdas: None,
            grid: None,
            delta: DEFAULT_DELTA,
            ablation_fraction: DEFAULT_ABLATION_FRACTION,
            ablation_runs: DEFAULT_ABLATION_RUNS,
            eval_split: EvalSplit::Test,
            threads: 1,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        self.train.with_seed(self.seed)
    }

    pub fn grid_or_default(&self) -> Vec<(f64, f64)> {
        self.grid.clone().unwrap_or_else(default_grid)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.task.is_empty() {
            return bad("task is not set".into());
        }
        if !(self.ablation_fraction > 0.0 && self.ablation_fraction < 1.0) {
            return bad(format!(
                "ablation_fraction {} outside (0, 1)",
                self.ablation_fraction
            ));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if self.ablation_runs == 0 {
            return bad("ablation_runs must be at least 1".into());
        }
        if let Some((l1, l2)) = self.lambdas {
            check_lambda_pair(l1, l2)?;
        }
        if let Some(grid) = &self.grid {
            if grid.is_empty() {
                return bad("grid is empty".into());
            }
            for &(l1, l2) in grid {
                check_lambda_pair(l1, l2)?;
            }
        }
        self.train_config().validate()
    }
}

fn check_lambda_pair(l1: f64, l2: f64) -> Result<()> {
    if l1 >= 0.0 && l2 >= 0.0 && l1.is_finite() && l2.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "lambdas ({l1}, {l2}) must be finite and non-negative"
        )))
    }
}
