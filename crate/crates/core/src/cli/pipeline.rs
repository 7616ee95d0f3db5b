// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{EvalSplit, RunConfig};
use crate::analysis::write_reports;
use crate::dataset::{control_task, load_splits, ControlMapping, DatasetSplits, Split};
use crate::error::{Error, Result};
use crate::probe::{evaluate, evaluate_ablated, selectivity, train, ProbeModel, TrainConfig};
use crate::ranking::{full_ranking, select_top, NeuronRanking, DEFAULT_P_STEP};
use crate::search::{
    fraction_count, grid_search, SearchResult, SearchSettings, TaskData, DEFAULT_ALPHA,
    DEFAULT_BETA,
};
use crate::selection::{minimal_neurons, oracle, SelectionTrace, STEP_FRACTION};
use crate::util::write_json;

pub const SEARCH_RESULT_FILE: &str = "search_result.json";
pub const MODEL_FILE: &str = "model.json";
pub const RANKING_FILE: &str = "ranking.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const SELECTION_FILE: &str = "selection_trace.json";
pub const CONTROL_FILE: &str = "control.json";
pub const SELECTIVITY_FILE: &str = "selectivity.json";
pub const TOP_RANKING_FILE: &str = "ranking_top.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    All,
    Top,
    Random,
    Bottom,
}

/// Accuracy with only a chosen neuron set kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub fraction: f64,
    pub num_neurons: usize,
    /// Sampling seeds, one per random run. Empty for other modes.
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    /// Mean of `accuracies`.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task: String,
    pub split: String,
    pub total_neurons: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn accuracy(&self, mode: AblationMode) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.mode == mode)
            .map(|r| r.accuracy)
    }
}

/// `count` neurons drawn uniformly without replacement, sorted.
pub fn random_subset(num_neurons: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked =
        rand::seq::index::sample(&mut rng, num_neurons, count.min(num_neurons)).into_vec();
    picked.sort_unstable();
    picked
}

/// Evaluates `model` with only the `mode` neurons kept.
///
/// `fraction` must lie in (0, 1]. Random runs use seeds `seed + run_index`.
pub fn ablate(
    model: &ProbeModel,
    ranking: &NeuronRanking,
    data: TaskData<'_>,
    mode: AblationMode,
    fraction: f64,
    runs: usize,
    seed: u64,
) -> Result<AblationRow> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "ablation fraction {fraction} outside (0, 1]"
        )));
    }
    let total = data.dataset.num_neurons();
    if ranking.num_candidates != total {
        return Err(Error::DimensionMismatch {
            expected: total,
            found: ranking.num_candidates,
        });
    }
    let (fraction, k) = match mode {
        AblationMode::All => (1.0, total),
        _ => (fraction, fraction_count(fraction, total)),
    };
    let eval = |keep: &[usize]| evaluate_ablated(model, data.dataset, data.labels, keep);
    let (seeds, accuracies) = match mode {
        AblationMode::All => {
            let all: Vec<usize> = (0..total).collect();
            (Vec::new(), vec![eval(&all)?])
        }
        AblationMode::Top => {
            if ranking.len() < k {
                return Err(Error::InvalidN {
                    requested: k,
                    available: ranking.len(),
                });
            }
            (Vec::new(), vec![eval(ranking.top(k))?])
        }
        AblationMode::Bottom => (Vec::new(), vec![eval(ranking.bottom(k)?)?]),
        AblationMode::Random => {
            if runs == 0 {
                return Err(Error::InvalidConfig(
                    "random ablation needs at least one run".into(),
                ));
            }
            let seeds: Vec<u64> = (0..runs as u64).map(|r| seed.wrapping_add(r)).collect();
            let accuracies = seeds
                .iter()
                .map(|&s| eval(&random_subset(total, k, s)))
                .collect::<Result<Vec<_>>>()?;
            (seeds, accuracies)
        }
    };
    let accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    Ok(AblationRow {
        mode,
        fraction,
        num_neurons: k,
        seeds,
        accuracies,
        accuracy,
    })
}

/// The all/top/random/bottom table at one fraction.
pub fn ablation_table(
    model: &ProbeModel,
    ranking: &NeuronRanking,
    data: TaskData<'_>,
    split: &str,
    fraction: f64,
    runs: usize,
    seed: u64,
) -> Result<AblationTable> {
    let rows = [
        AblationMode::All,
        AblationMode::Top,
        AblationMode::Random,
        AblationMode::Bottom,
    ]
    .into_iter()
    .map(|mode| ablate(model, ranking, data, mode, fraction, runs, seed))
    .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        task: data.labels.task_name.clone(),
        split: split.to_string(),
        total_neurons: data.dataset.num_neurons(),
        rows,
    })
}

/// Linguistic and control accuracy for all neurons and the selected ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectivityReport {
    pub task: String,
    pub control_task: String,
    pub split: String,
    #[serde(rename = "Neu_a")]
    pub neurons_all: usize,
    #[serde(rename = "Neu_t")]
    pub neurons_top: usize,
    #[serde(rename = "Acc_a")]
    pub accuracy_all: f64,
    #[serde(rename = "Acc_t")]
    pub accuracy_top: f64,
    pub control_accuracy_all: f64,
    pub control_accuracy_top: f64,
    #[serde(rename = "Sel_a")]
    pub selectivity_all: f64,
    #[serde(rename = "Sel_t")]
    pub selectivity_top: f64,
}

/// Trains control probes on all neurons and on `trace.minimal_set` with the
/// trace's lambdas, and compares them with the linguistic accuracies.
pub fn selectivity_report(
    splits: &DatasetSplits,
    task: &str,
    trace: &SelectionTrace,
    eval_split: EvalSplit,
    seed: u64,
) -> Result<(ControlMapping, SelectivityReport)> {
    let (mapping, [ctrl_train, ctrl_dev, ctrl_test]) = control_task(splits, task, seed)?;
    let (eval_ds, ctrl_eval) = match eval_split {
        EvalSplit::Dev => (&splits.dev.dataset, &ctrl_dev),
        EvalSplit::Test => (&splits.test.dataset, &ctrl_test),
    };
    let (l1, l2) = (trace.lambda1, trace.lambda2);
    let full = train(
        &splits.train.dataset,
        &ctrl_train,
        &trace.config,
        l1,
        l2,
        None,
    )?;
    let control_all = evaluate(&full, eval_ds, ctrl_eval)?;
    let top = train(
        &splits.train.dataset,
        &ctrl_train,
        &trace.config,
        l1,
        l2,
        Some(&trace.minimal_set),
    )?;
    let control_top = evaluate(&top, eval_ds, ctrl_eval)?;
    let accuracy_top = trace.accepted().retrained_accuracy;
    let report = SelectivityReport {
        task: task.to_string(),
        control_task: mapping.control_task_name(),
        split: eval_split.name().to_string(),
        neurons_all: splits.train.dataset.num_neurons(),
        neurons_top: trace.minimal_set.len(),
        accuracy_all: trace.oracle_accuracy,
        accuracy_top,
        control_accuracy_all: control_all,
        control_accuracy_top: control_top,
        selectivity_all: selectivity(trace.oracle_accuracy, control_all),
        selectivity_top: selectivity(accuracy_top, control_top),
    };
    Ok((mapping, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub task: String,
    pub control_task: String,
    pub seed: u64,
    pub num_types: usize,
    pub tagset: Vec<String>,
    pub source_distribution: Vec<f64>,
}

impl From<&ControlMapping> for ControlSummary {
    fn from(m: &ControlMapping) -> Self {
        Self {
            task: m.task_name.clone(),
            control_task: m.control_task_name(),
            seed: m.seed,
            num_types: m.mapping.len(),
            tagset: m.tagset.clone(),
            source_distribution: m.source_distribution.clone(),
        }
    }
}

/// Settings the run used that are not part of [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDefaults {
    pub train: TrainConfig,
    pub p_step: f64,
    pub selection_step_fraction: f64,
    pub search_alpha: f64,
    pub search_beta: f64,
    pub search_split: String,
    pub random_ablation_seeds: String,
    pub tie_rules: Vec<String>,
}

impl RunDefaults {
    fn for_config(config: &RunConfig) -> Self {
        Self {
            train: config.train_config(),
            p_step: DEFAULT_P_STEP,
            selection_step_fraction: STEP_FRACTION,
            search_alpha: DEFAULT_ALPHA,
            search_beta: DEFAULT_BETA,
            search_split: "dev".into(),
            random_ablation_seeds: "seed + run_index".into(),
            tie_rules: vec![
                "prediction: lowest label index among equal logits".into(),
                "per-label order: |weight| descending, then neuron index".into(),
                "ranking: first inclusion step, then max |weight| descending, then neuron index"
                    .into(),
                "search winner: highest score, then smallest (lambda1, lambda2)".into(),
                "dominant layer: plurality, then lowest layer index".into(),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChosenLambdas {
    pub lambda1: f64,
    pub lambda2: f64,
    /// "pinned" or "search".
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub root: PathBuf,
    pub num_neurons: usize,
    pub num_tokens: [usize; 3],
    pub fingerprints: [String; 3],
}

/// Record of one full run. `created_at` is the only field that differs
/// between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub created_at: String,
    /// "complete" or "failed".
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub config: RunConfig,
    pub defaults: RunDefaults,
    pub dataset: DatasetInfo,
    pub search_skipped: bool,
    pub lambdas: Option<ChosenLambdas>,
    /// Files written by the run, relative to the output directory.
    pub artifacts: Vec<String>,
}

/// In-memory results of a completed full run.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub manifest: Manifest,
    pub search: Option<SearchResult>,
    pub ablation: AblationTable,
    pub trace: SelectionTrace,
    pub selectivity: SelectivityReport,
    pub ranking: NeuronRanking,
}

fn eval_split_of(splits: &DatasetSplits, which: EvalSplit) -> &Split {
    match which {
        EvalSplit::Dev => &splits.dev,
        EvalSplit::Test => &splits.test,
    }
}

/// Runs the grid search on train/dev, on `threads` workers.
pub fn run_search(splits: &DatasetSplits, config: &RunConfig) -> Result<SearchResult> {
    let task = &config.task;
    let train_data = TaskData::new(&splits.train.dataset, splits.train.column(task)?);
    let dev = TaskData::new(&splits.dev.dataset, splits.dev.column(task)?);
    let grid = config.grid_or_default();
    let settings = SearchSettings {
        ablation_fraction: config.ablation_fraction,
        parallel: config.threads > 1,
        ..SearchSettings::default()
    };
    let search = || grid_search(train_data, dev, &grid, &config.train_config(), &settings);
    if config.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(search)
    } else {
        search()
    }
}

struct Recorder<'a> {
    dir: &'a Path,
    artifacts: Vec<String>,
}

impl Recorder<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        write_json(&path, value)
    }
}

/// Runs the whole pipeline and writes every artifact plus `manifest.json`
/// under `config.output_dir`.
///
/// Dataset errors abort before anything is written. Later failures still
/// leave a manifest with `status: "failed"` listing what was produced.
pub fn full_run(config: &RunConfig) -> Result<RunOutputs> {
    config.validate()?;
    let splits = load_splits(&config.dataset_root)?;
    for (_, split) in splits.splits() {
        split.column(&config.task)?;
    }
    let dir = config.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut effective = config.clone();
    effective.train = config.train_config();
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        status: "failed".into(),
        error: None,
        config: effective,
        defaults: RunDefaults::for_config(config),
        dataset: DatasetInfo {
            root: config.dataset_root.clone(),
            num_neurons: splits.train.dataset.num_neurons(),
            num_tokens: [
                splits.train.dataset.num_tokens(),
                splits.dev.dataset.num_tokens(),
                splits.test.dataset.num_tokens(),
            ],
            fingerprints: [
                splits.train.dataset.fingerprint().to_string(),
                splits.dev.dataset.fingerprint().to_string(),
                splits.test.dataset.fingerprint().to_string(),
            ],
        },
        search_skipped: config.lambdas.is_some(),
        lambdas: None,
        artifacts: Vec::new(),
    };
    // A stale search result from an earlier run would contradict the manifest.
    if config.lambdas.is_some() {
        let stale = dir.join(SEARCH_RESULT_FILE);
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
    }

    let mut rec = Recorder {
        dir,
        artifacts: Vec::new(),
    };
    let outcome = run_stages(config, &splits, &mut rec, &mut manifest);
    manifest.artifacts = rec.artifacts;
    match outcome {
        Ok(mut outputs) => {
            manifest.status = "complete".into();
            write_json(&dir.join(MANIFEST_FILE), &manifest)?;
            outputs.manifest = manifest;
            Ok(outputs)
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            write_json(&dir.join(MANIFEST_FILE), &manifest)?;
            Err(e)
        }
    }
}

fn run_stages(
    config: &RunConfig,
    splits: &DatasetSplits,
    rec: &mut Recorder<'_>,
    manifest: &mut Manifest,
) -> Result<RunOutputs> {
    let task = config.task.as_str();
    let train_config = config.train_config();

    let (search, (l1, l2), source) = match config.lambdas {
        Some(pinned) => (None, pinned, "pinned"),
        None => {
            log::info!("searching {} lambda pairs", config.grid_or_default().len());
            let result = run_search(splits, config)?;
            rec.json(SEARCH_RESULT_FILE, &result)?;
            let winner = (result.winner.lambda1, result.winner.lambda2);
            (Some(result), winner, "search")
        }
    };
    manifest.lambdas = Some(ChosenLambdas {
        lambda1: l1,
        lambda2: l2,
        source: source.into(),
    });

    log::info!("training oracle probe at lambda1={l1} lambda2={l2}");
    let eval = eval_split_of(splits, config.eval_split);
    let train_data = TaskData::new(&splits.train.dataset, splits.train.column(task)?);
    let eval_data = TaskData::new(&eval.dataset, eval.column(task)?);
    let (model, oracle_accuracy) = oracle(train_data, eval_data, l1, l2, &train_config)?;
    let model_path = rec.path(MODEL_FILE);
    rec.artifacts.push("model.bin".into());
    model.save(&model_path)?;

    log::info!("ranking neurons");
    let ranking = full_ranking(&model)?;
    ranking.save(rec.path(RANKING_FILE))?;

    log::info!("ablation table at fraction {}", config.ablation_fraction);
    let ablation = ablation_table(
        &model,
        &ranking,
        eval_data,
        config.eval_split.name(),
        config.ablation_fraction,
        config.ablation_runs,
        config.seed,
    )?;
    rec.json(ABLATION_FILE, &ablation)?;

    log::info!("selecting minimal neuron set at delta {}", config.delta);
    let trace = minimal_neurons(
        &ranking,
        train_data,
        eval_data,
        oracle_accuracy,
        config.delta,
        l1,
        l2,
        &train_config,
    )?;
    rec.json(SELECTION_FILE, &trace)?;

    log::info!("training control probes");
    let (mapping, selectivity) =
        selectivity_report(splits, task, &trace, config.eval_split, config.seed)?;
    rec.json(CONTROL_FILE, &ControlSummary::from(&mapping))?;
    rec.json(SELECTIVITY_FILE, &selectivity)?;

    log::info!("writing analysis reports");
    let top = select_top(&model, trace.minimal_set.len())?;
    top.save(rec.path(TOP_RANKING_FILE))?;
    for path in write_reports(rec.dir, &top, splits.train.dataset.layers())? {
        if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
            rec.artifacts.push(name.to_string());
        }
    }

    Ok(RunOutputs {
        manifest: manifest.clone(),
        search,
        ablation,
        trace,
        selectivity,
        ranking,
    })
}
