// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.
//!
//! Every subcommand reads a [`RunConfig`] (from `--config` and flags, flags
//! winning), writes its outputs under `output_dir` and prints a JSON summary
//! on stdout. Exit codes: 0 success, 1 validation failure, 2 runtime failure.

mod config;
mod pipeline;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::{EvalSplit, RunConfig, DEFAULT_ABLATION_RUNS, DEFAULT_DELTA};
pub use pipeline::{
    ablate, ablation_table, full_run, random_subset, run_search, selectivity_report, AblationMode,
    AblationRow, AblationTable, ChosenLambdas, ControlSummary, DatasetInfo, Manifest, RunDefaults,
    RunOutputs, SelectivityReport, ABLATION_FILE, CONTROL_FILE, MANIFEST_FILE, MODEL_FILE,
    RANKING_FILE, SEARCH_RESULT_FILE, SELECTION_FILE, SELECTIVITY_FILE, TOP_RANKING_FILE,
};

use crate::analysis::write_reports;
use crate::dataset::{
    control_task, load_dataset, load_splits, read_layers, write_control, LabelColumn,
};
use crate::error::{Error, Result};
use crate::probe::{evaluate, train, ProbeModel};
use crate::ranking::{full_ranking, select_top, NeuronRanking};
use crate::search::{SearchResult, TaskData};
use crate::selection::minimal_neurons;
use crate::util::write_json;

#[derive(Debug, Parser)]
#[command(
    name = "neuroprobe",
    version,
    about = "Rank and select individual neurons with linear probes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset directory (or a root holding train/dev/test).
    Validate {
        /// Directory to check. Defaults to the configured dataset root.
        path: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a probe on the train split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Neuron subset as a JSON list, inline or in a file.
        #[arg(long)]
        subset: Option<String>,
        /// Model header path. Defaults to <output_dir>/model.json.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Accuracy of a trained probe on one split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Split to measure. Defaults to the configured eval split.
        #[arg(long, value_enum)]
        split: Option<EvalSplit>,
    },
    /// Accuracy with only the top, bottom or a random share of neurons kept.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        mode: AblationMode,
        /// Share of neurons kept, in (0, 1]. Defaults to the ablation fraction.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        ranking: Option<PathBuf>,
    },
    /// Grid search over (lambda1, lambda2) on the dev split.
    SearchLambdas {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Rank neurons by probe weight mass.
    Rank {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Stop once this many neurons are ranked. Defaults to all.
        #[arg(long)]
        top: Option<usize>,
        /// Output path. Defaults to <output_dir>/ranking.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Smallest ranking prefix that retrains to within delta of the oracle.
    SelectMinimal {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        ranking: Option<PathBuf>,
    },
    /// Write control-task labels next to each split's task labels.
    Control {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Layer and label reports for a ranking.
    Report {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ranking: Option<PathBuf>,
    },
    /// Search, oracle, ranking, ablation, selection, control and reports.
    FullRun {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Flags mirroring [`RunConfig`]. Unset flags keep the file or default value.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset_root: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, requires = "lambda2")]
    pub lambda1: Option<f64>,
    #[arg(long, requires = "lambda1")]
    pub lambda2: Option<f64>,
    /// JSON list of [lambda1, lambda2] pairs, inline or in a file.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub ablation_fraction: Option<f64>,
    /// Random ablation runs to average.
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long, value_enum)]
    pub eval_split: Option<EvalSplit>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.dataset_root {
            c.dataset_root = v.clone();
        }
        if let Some(v) = &self.task {
            c.task = v.clone();
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.epochs {
            c.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.train.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            c.train.learning_rate = v;
        }
        if let (Some(l1), Some(l2)) = (self.lambda1, self.lambda2) {
            c.lambdas = Some((l1, l2));
        }
        if let Some(v) = &self.grid {
            c.grid = Some(parse_json_arg(v, "grid")?);
        }
        if let Some(v) = self.delta {
            c.delta = v;
        }
        if let Some(v) = self.ablation_fraction {
            c.ablation_fraction = v;
        }
        if let Some(v) = self.runs {
            c.ablation_runs = v;
        }
        if let Some(v) = self.eval_split {
            c.eval_split = v;
        }
        if let Some(v) = self.threads {
            c.threads = v;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        Ok(c)
    }
}

/// Parses `arg` as JSON, or reads it from the file it names.
fn parse_json_arg<T: serde::de::DeserializeOwned>(arg: &str, what: &str) -> Result<T> {
    let path = Path::new(arg);
    let text = if path.is_file() {
        fs::read_to_string(path).map_err(|e| Error::io(path, e))?
    } else {
        arg.to_string()
    };
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{what}: {e}")))
}

/// Exit status for an error: 1 for bad input data or configuration.
pub fn exit_code(error: &Error) -> u8 {
    let input_problem = error.is_validation()
        || matches!(
            error,
            Error::InvalidConfig(_) | Error::UnknownTask(_) | Error::MissingRanking(_)
        );
    if input_problem {
        1
    } else {
        2
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidConfig(format!("serializing output: {e}")))?;
    println!("{text}");
    Ok(())
}

fn output_path(config: &RunConfig, explicit: &Option<PathBuf>, default: &str) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| config.output_dir.join(default))
}

fn create_output_dir(config: &RunConfig) -> Result<()> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn split_dir(config: &RunConfig, split: &str) -> PathBuf {
    config.dataset_root.join(split)
}

fn load_ranking(path: &Path) -> Result<NeuronRanking> {
    if !path.is_file() {
        return Err(Error::MissingRanking(path.to_path_buf()));
    }
    NeuronRanking::load(path)
}

fn task_column(columns: Vec<LabelColumn>, task: &str) -> Result<LabelColumn> {
    columns
        .into_iter()
        .find(|c| c.task_name == task)
        .ok_or_else(|| Error::UnknownTask(task.to_string()))
}

#[derive(Serialize)]
struct SplitSummary {
    path: PathBuf,
    num_tokens: usize,
    num_neurons: usize,
    layers: Vec<String>,
    tasks: Vec<String>,
    fingerprint: String,
}

#[derive(Serialize)]
struct AccuracyReport<'a> {
    task: &'a str,
    split: &'a str,
    accuracy: f64,
    num_neurons: usize,
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Validate { path, config } => cmd_validate(path, &config.resolve()?),
        Command::Train {
            config,
            subset,
            model,
        } => cmd_train(&config.resolve()?, subset, model),
        Command::Eval {
            config,
            model,
            split,
        } => cmd_eval(&config.resolve()?, model, split),
        Command::Ablate {
            config,
            mode,
            fraction,
            model,
            ranking,
        } => cmd_ablate(&config.resolve()?, mode, fraction, model, ranking),
        Command::SearchLambdas { config } => cmd_search(&config.resolve()?),
        Command::Rank {
            config,
            model,
            top,
            out,
        } => cmd_rank(&config.resolve()?, model, top, out),
        Command::SelectMinimal {
            config,
            model,
            ranking,
        } => cmd_select(&config.resolve()?, model, ranking),
        Command::Control { config } => cmd_control(&config.resolve()?),
        Command::Report { config, ranking } => cmd_report(&config.resolve()?, ranking),
        Command::FullRun { config } => {
            let outputs = full_run(&config.resolve()?)?;
            print_json(&outputs.manifest)
        }
    }
}

fn cmd_validate(path: Option<PathBuf>, config: &RunConfig) -> Result<()> {
    let root = path.unwrap_or_else(|| config.dataset_root.clone());
    let summarize =
        |path: PathBuf, ds: &crate::dataset::ActivationDataset, columns: &[LabelColumn]| {
            SplitSummary {
                path,
                num_tokens: ds.num_tokens(),
                num_neurons: ds.num_neurons(),
                layers: ds.layers().iter().map(|l| l.name.clone()).collect(),
                tasks: columns.iter().map(|c| c.task_name.clone()).collect(),
                fingerprint: ds.fingerprint().to_string(),
            }
        };
    let summaries = if root.join("train").is_dir() {
        let splits = load_splits(&root)?;
        splits
            .splits()
            .iter()
            .map(|(name, s)| summarize(root.join(name), &s.dataset, &s.columns))
            .collect::<Vec<_>>()
    } else {
        let (ds, columns) = load_dataset(&root)?;
        vec![summarize(root.clone(), &ds, &columns)]
    };
    print_json(&serde_json::json!({ "status": "ok", "splits": summaries }))
}

/// Pinned lambdas, else the winner of a previous search in `output_dir`.
fn resolve_lambdas(config: &RunConfig) -> Result<(f64, f64)> {
    if let Some(l) = config.lambdas {
        return Ok(l);
    }
    let path = config.output_dir.join(SEARCH_RESULT_FILE);
    if !path.is_file() {
        return Err(Error::InvalidConfig(format!(
            "no lambdas given and no {} found; pass --lambda1/--lambda2 or run search-lambdas",
            path.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let result: SearchResult = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    Ok((result.winner.lambda1, result.winner.lambda2))
}

fn cmd_train(
    config: &RunConfig,
    subset: Option<String>,
    model_path: Option<PathBuf>,
) -> Result<()> {
    config.validate()?;
    let (l1, l2) = resolve_lambdas(config)?;
    let subset: Option<Vec<usize>> = subset.map(|s| parse_json_arg(&s, "subset")).transpose()?;
    let (ds, columns) = load_dataset(split_dir(config, "train"))?;
    let labels = task_column(columns, &config.task)?;
    let model = train(
        &ds,
        &labels,
        &config.train_config(),
        l1,
        l2,
        subset.as_deref(),
    )?;
    create_output_dir(config)?;
    let path = output_path(config, &model_path, MODEL_FILE);
    model.save(&path)?;
    print_json(&serde_json::json!({
        "model": path,
        "task": model.task,
        "num_features": model.num_features,
        "lambda1": l1,
        "lambda2": l2,
    }))
}

fn cmd_eval(
    config: &RunConfig,
    model_path: Option<PathBuf>,
    split: Option<EvalSplit>,
) -> Result<()> {
    let model = ProbeModel::load(output_path(config, &model_path, MODEL_FILE))?;
    let split = split.unwrap_or(config.eval_split).name();
    let (ds, columns) = load_dataset(split_dir(config, split))?;
    let labels = task_column(columns, &model.task)?;
    let accuracy = evaluate(&model, &ds, &labels)?;
    let report = AccuracyReport {
        task: &model.task,
        split,
        accuracy,
        num_neurons: model.num_features,
    };
    create_output_dir(config)?;
    write_json(
        &config.output_dir.join(format!("accuracy_{split}.json")),
        &report,
    )?;
    print_json(&report)
}

fn cmd_ablate(
    config: &RunConfig,
    mode: AblationMode,
    fraction: Option<f64>,
    model_path: Option<PathBuf>,
    ranking_path: Option<PathBuf>,
) -> Result<()> {
    let ranking = load_ranking(&output_path(config, &ranking_path, RANKING_FILE))?;
    let model = ProbeModel::load(output_path(config, &model_path, MODEL_FILE))?;
    let split = config.eval_split.name();
    let (ds, columns) = load_dataset(split_dir(config, split))?;
    let labels = task_column(columns, &model.task)?;
    let fraction = fraction.unwrap_or(config.ablation_fraction);
    let row = ablate(
        &model,
        &ranking,
        TaskData::new(&ds, &labels),
        mode,
        fraction,
        config.ablation_runs,
        config.seed,
    )?;
    create_output_dir(config)?;
    let name = serde_json::to_value(mode)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    write_json(
        &config.output_dir.join(format!("ablation_{name}.json")),
        &row,
    )?;
    print_json(&row)
}

fn cmd_search(config: &RunConfig) -> Result<()> {
    config.validate()?;
    let splits = load_splits(&config.dataset_root)?;
    let result = run_search(&splits, config)?;
    create_output_dir(config)?;
    write_json(&config.output_dir.join(SEARCH_RESULT_FILE), &result)?;
    print_json(&serde_json::json!({
        "winner": result.winner,
        "winner_score": result.winner_score,
        "grid_points": result.grid.len(),
    }))
}

fn cmd_rank(
    config: &RunConfig,
    model_path: Option<PathBuf>,
    top: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let model = ProbeModel::load(output_path(config, &model_path, MODEL_FILE))?;
    let ranking = match top {
        Some(n) => select_top(&model, n)?,
        None => full_ranking(&model)?,
    };
    create_output_dir(config)?;
    let path = output_path(config, &out, RANKING_FILE);
    ranking.save(&path)?;
    print_json(&serde_json::json!({
        "ranking": path,
        "num_ranked": ranking.len(),
        "num_candidates": ranking.num_candidates,
    }))
}

fn cmd_select(
    config: &RunConfig,
    model_path: Option<PathBuf>,
    ranking_path: Option<PathBuf>,
) -> Result<()> {
    if config.delta.is_nan() || config.delta <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "delta must be positive, got {}",
            config.delta
        )));
    }
    let ranking = load_ranking(&output_path(config, &ranking_path, RANKING_FILE))?;
    let model = ProbeModel::load(output_path(config, &model_path, MODEL_FILE))?;
    let splits = load_splits(&config.dataset_root)?;
    let eval = match config.eval_split {
        EvalSplit::Dev => &splits.dev,
        EvalSplit::Test => &splits.test,
    };
    let train_data = TaskData::new(&splits.train.dataset, splits.train.column(&model.task)?);
    let eval_data = TaskData::new(&eval.dataset, eval.column(&model.task)?);
    let oracle_accuracy = evaluate(&model, eval_data.dataset, eval_data.labels)?;
    let train_config = model.config.unwrap_or_else(|| config.train_config());
    let trace = minimal_neurons(
        &ranking,
        train_data,
        eval_data,
        oracle_accuracy,
        config.delta,
        model.lambda1,
        model.lambda2,
        &train_config,
    )?;
    create_output_dir(config)?;
    write_json(&config.output_dir.join(SELECTION_FILE), &trace)?;
    print_json(&serde_json::json!({
        "oracle_accuracy": trace.oracle_accuracy,
        "num_neurons": trace.minimal_set.len(),
        "retrained_accuracy": trace.accepted().retrained_accuracy,
        "forced": trace.forced,
    }))
}

fn cmd_control(config: &RunConfig) -> Result<()> {
    if config.task.is_empty() {
        return Err(Error::InvalidConfig("task is not set".into()));
    }
    let splits = load_splits(&config.dataset_root)?;
    let (mapping, columns) = control_task(&splits, &config.task, config.seed)?;
    for ((name, _), column) in splits.splits().iter().zip(&columns) {
        write_control(split_dir(config, name), &mapping, column)?;
    }
    print_json(&ControlSummary::from(&mapping))
}

fn cmd_report(config: &RunConfig, ranking_path: Option<PathBuf>) -> Result<()> {
    let ranking = load_ranking(&output_path(config, &ranking_path, RANKING_FILE))?;
    let layers = read_layers(split_dir(config, "train"))?;
    let written = write_reports(&config.output_dir, &ranking, &layers)?;
    print_json(&serde_json::json!({ "reports": written }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"task":"pos","seed":4,"delta":1.0,"lambdas":[0.1,0.2]}"#,
        )
        .unwrap();
        let args = ConfigArgs {
            config: Some(path),
            seed: Some(7),
            epochs: Some(3),
            ..ConfigArgs::default()
        };
        let c = args.resolve().unwrap();
        assert_eq!(c.task, "pos");
        assert_eq!(c.seed, 7);
        assert_eq!(c.delta, 1.0);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.lambdas, Some((0.1, 0.2)));
    }

    #[test]
    fn grid_flag_inline_json() {
        let args = ConfigArgs {
            grid: Some("[[0, 0.1], [0.01, 0]]".into()),
            ..ConfigArgs::default()
        };
        assert_eq!(
            args.resolve().unwrap().grid,
            Some(vec![(0.0, 0.1), (0.01, 0.0)])
        );
    }

    #[test]
    fn lambda_flags_must_come_together() {
        assert!(Cli::try_parse_from(["neuroprobe", "train", "--lambda1", "0.1"]).is_err());
        assert!(
            Cli::try_parse_from(["neuroprobe", "train", "--lambda1", "0.1", "--lambda2", "0"])
                .is_ok()
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::MissingFile(PathBuf::from("x"))), 1);
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), 1);
        assert_eq!(exit_code(&Error::Diverged { step: 3 }), 2);
        assert_eq!(exit_code(&Error::NoViablePoint), 2);
    }

    #[test]
    fn every_subcommand_parses() {
        for sub in [
            "validate",
            "train",
            "eval",
            "search-lambdas",
            "rank",
            "select-minimal",
            "control",
            "report",
            "full-run",
        ] {
            Cli::try_parse_from(["neuroprobe", sub]).unwrap_or_else(|e| panic!("{sub}: {e}"));
        }
        Cli::try_parse_from(["neuroprobe", "ablate", "--mode", "random"]).unwrap();
    }
}
