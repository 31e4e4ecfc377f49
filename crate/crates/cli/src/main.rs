//! Command-line front end: dataset generation, training, evaluation and
//! ground-metric inspection, each writing a manifest of its artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use m3dn::data::{
    generate, read_dataset, split, write_dataset, BagRecord, DataError, GeneratorConfig,
    M3Dataset,
};
use m3dn::metric::matrix_to_csv;
use m3dn::metrics::{EvalPair, EvaluationReport, MetricsError};
use m3dn::net::Bag;
use m3dn::train::{
    fit_with_log, load_checkpoint, predict, save_checkpoint, LabeledExample, TrainError,
    TrainingConfig, TrainingData, UnlabeledExample,
};

const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

const EXIT_IO: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "m3dn", version, about = "Multi-modal multi-instance multi-label training")]
struct Cli {
    /// Worker thread cap (falls back to M3DN_THREADS; compute is
    /// currently single-threaded and the value is only recorded).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset plus train/test split files.
    Gen(GenArgs),
    /// Train on a dataset file; records with labels are supervised rows.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Export the learned kernel, ground metric and correlation view.
    InspectMetric(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Generator config (JSON mirroring the generator fields).
    config: PathBuf,
    /// Output dataset path; `.gz` suffix enables compression.
    out: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    dataset: PathBuf,
    /// Training config (JSON mirroring the trainer fields).
    config: PathBuf,
    /// Output directory for checkpoint, logs, CSVs and manifest.
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    /// Report path; JSON is written here, CSV next to it.
    report: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    /// Output stem; writes `<stem>-s.csv`, `<stem>-m.csv` and
    /// `<stem>-correlation.csv`.
    out: PathBuf,
}

/// Failure carrying the exit code mandated by the command contract:
/// 0 success, 1 I/O, 2 validation, 3 numerical.
struct CmdError {
    code: u8,
    message: String,
}

impl CmdError {
    fn io(message: impl Into<String>) -> CmdError {
        CmdError {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    fn validation(message: impl Into<String>) -> CmdError {
        CmdError {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> CmdError {
        let code = match &e {
            DataError::Io(_) => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        CmdError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CmdError {
    fn from(e: TrainError) -> CmdError {
        let code = match &e {
            TrainError::Io(_) => EXIT_IO,
            TrainError::NonFiniteObjective { .. } => EXIT_NUMERICAL,
            TrainError::InvalidConfig(_) | TrainError::NoLabeledData | TrainError::Checkpoint(_) => {
                EXIT_VALIDATION
            }
            _ => EXIT_NUMERICAL,
        };
        CmdError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<MetricsError> for CmdError {
    fn from(e: MetricsError) -> CmdError {
        CmdError::validation(e.to_string())
    }
}

impl From<std::io::Error> for CmdError {
    fn from(e: std::io::Error) -> CmdError {
        CmdError::io(e.to_string())
    }
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: String,
    command: String,
    seed: Option<u64>,
    threads: Option<usize>,
    config: serde_json::Value,
    artifacts: Vec<String>,
    wall_clock_ms: u128,
}

impl RunManifest {
    fn new(command: &str, threads: Option<usize>) -> RunManifest {
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            seed: None,
            threads,
            config: serde_json::Value::Null,
            artifacts: Vec::new(),
            wall_clock_ms: 0,
        }
    }

    fn add_artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    /// Write atomically: temp file in the target directory, then rename.
    fn write(&self, path: &Path) -> Result<(), CmdError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CmdError::io(format!("manifest serialization: {e}")))?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
        let tmp = match dir {
            Some(dir) => dir.join(".manifest.tmp"),
            None => PathBuf::from(".manifest.tmp"),
        };
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CmdError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CmdError::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CmdError::validation(format!("{}: {e}", path.display())))
}

/// Sibling path with a suffix spliced in before the `.jsonl[.gz]`
/// extension chain: `data.jsonl.gz` → `data.train.jsonl.gz`.
fn split_path(out: &Path, part: &str) -> PathBuf {
    let name = out.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    let (stem, ext) = match name.strip_suffix(".jsonl.gz") {
        Some(stem) => (stem.to_string(), ".jsonl.gz"),
        None => match name.strip_suffix(".jsonl") {
            Some(stem) => (stem.to_string(), ".jsonl"),
            None => (name.to_string(), ""),
        },
    };
    out.with_file_name(format!("{stem}.{part}{ext}"))
}

fn cmd_gen(args: &GenArgs, threads: Option<usize>) -> Result<(), CmdError> {
    let start = Instant::now();
    let mut cfg: GeneratorConfig = read_json_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;

    let (dataset, _) = generate(&cfg)?;
    let splits = split(&dataset, &cfg)?;
    write_dataset(&dataset, &args.out)?;

    // Training file: labeled rows keep labels; unlabeled rows (already
    // missing-modality masked by the split) are stripped of labels.
    let mut train_records: Vec<BagRecord> = splits.train_labeled.clone();
    train_records.extend(splits.train_unlabeled.iter().map(|r| BagRecord {
        labels: None,
        ..r.clone()
    }));
    let train_set = M3Dataset {
        header: dataset.header.clone(),
        records: train_records,
    };
    let test_set = M3Dataset {
        header: dataset.header.clone(),
        records: splits.test.clone(),
    };
    let train_path = split_path(&args.out, "train");
    let test_path = split_path(&args.out, "test");
    write_dataset(&train_set, &train_path)?;
    write_dataset(&test_set, &test_path)?;

    let mut manifest = RunManifest::new("gen", threads);
    manifest.seed = Some(cfg.seed);
    manifest.config = serde_json::to_value(&cfg).map_err(|e| CmdError::io(e.to_string()))?;
    manifest.add_artifact(&args.out);
    manifest.add_artifact(&train_path);
    manifest.add_artifact(&test_path);
    manifest.wall_clock_ms = start.elapsed().as_millis();
    let manifest_path = args.out.with_file_name(format!(
        "{}.manifest.json",
        args.out.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    manifest.write(&manifest_path)?;
    Ok(())
}

fn dataset_to_training_data(dataset: &M3Dataset) -> Result<TrainingData, CmdError> {
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for record in &dataset.records {
        match (&record.labels, record.bag(1), record.bag(2)) {
            (Some(labels), Some(bag1), Some(bag2)) => labeled.push(LabeledExample {
                bag1,
                bag2,
                labels: labels.clone(),
            }),
            (Some(_), _, _) => {
                return Err(CmdError::validation(format!(
                    "labeled record {} is missing a modality",
                    record.id
                )));
            }
            (None, bag1, bag2) => unlabeled.push(UnlabeledExample { bag1, bag2 }),
        }
    }
    Ok(TrainingData::new(labeled, unlabeled, dataset.header.label_count)?)
}

fn cmd_train(args: &TrainArgs, threads: Option<usize>) -> Result<(), CmdError> {
    let start = Instant::now();
    let cfg: TrainingConfig = read_json_config(&args.config)?;
    cfg.validate()?;
    let dataset = read_dataset(&args.dataset)?;
    let data = dataset_to_training_data(&dataset)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let epochs_path = args.out_dir.join("epochs.jsonl");
    let mut epoch_log = std::fs::File::create(&epochs_path)?;
    let state = fit_with_log(&data, &cfg, Some(&mut epoch_log))?;

    let checkpoint_path = args.out_dir.join("checkpoint.json");
    save_checkpoint(&state, &cfg, &checkpoint_path)?;
    let kernel_path = args.out_dir.join("kernel.csv");
    let cost_path = args.out_dir.join("cost.csv");
    std::fs::write(
        &kernel_path,
        matrix_to_csv(state.kernel.entries(), &dataset.header.label_names),
    )?;
    std::fs::write(
        &cost_path,
        matrix_to_csv(state.cost.entries(), &dataset.header.label_names),
    )?;

    let mut manifest = RunManifest::new("train", threads);
    manifest.seed = Some(cfg.seed);
    manifest.config = serde_json::to_value(&cfg).map_err(|e| CmdError::io(e.to_string()))?;
    manifest.add_artifact(&checkpoint_path);
    manifest.add_artifact(&epochs_path);
    manifest.add_artifact(&kernel_path);
    manifest.add_artifact(&cost_path);
    manifest.wall_clock_ms = start.elapsed().as_millis();
    manifest.write(&args.out_dir.join("manifest.json"))?;
    Ok(())
}

/// One prediction source: which bags feed `predict`.
enum Source {
    Modality1,
    Modality2,
    Fused,
}

impl Source {
    fn name(&self) -> &'static str {
        match self {
            Source::Modality1 => "modality-1",
            Source::Modality2 => "modality-2",
            Source::Fused => "fused",
        }
    }

    fn bags<'a>(&self, b1: Option<&'a Bag>, b2: Option<&'a Bag>) -> (Option<&'a Bag>, Option<&'a Bag>) {
        match self {
            Source::Modality1 => (b1, None),
            Source::Modality2 => (None, b2),
            Source::Fused => (b1, b2),
        }
    }
}

fn cmd_eval(args: &EvalArgs, threads: Option<usize>) -> Result<(), CmdError> {
    let start = Instant::now();
    let (state, cfg) = load_checkpoint(&args.checkpoint)?;
    let dataset = read_dataset(&args.dataset)?;
    if dataset.header.label_count != state.kernel.dim() {
        return Err(CmdError::validation(format!(
            "dataset has {} labels but the checkpoint was trained with {}",
            dataset.header.label_count,
            state.kernel.dim()
        )));
    }

    let mut reports = Vec::new();
    for source in [Source::Modality1, Source::Modality2, Source::Fused] {
        let mut pairs = Vec::new();
        for record in &dataset.records {
            let Some(labels) = &record.labels else {
                continue;
            };
            let bag1 = record.bag(1);
            let bag2 = record.bag(2);
            let (b1, b2) = source.bags(bag1.as_ref(), bag2.as_ref());
            if b1.is_none() && b2.is_none() {
                continue;
            }
            let scores = predict(&state, b1, b2, &cfg)?;
            pairs.push(EvalPair::new(scores.values().to_vec(), labels.clone())?);
        }
        if pairs.is_empty() {
            return Err(CmdError::validation("empty evaluation set".to_string()));
        }
        reports.push(EvaluationReport::compute(source.name(), &pairs)?);
    }

    let json = serde_json::to_string_pretty(&reports).map_err(|e| CmdError::io(e.to_string()))?;
    std::fs::write(&args.report, json)?;
    let csv_path = args.report.with_extension("csv");
    let mut csv = String::from(EvaluationReport::csv_header());
    csv.push('\n');
    for report in &reports {
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    std::fs::write(&csv_path, csv)?;

    let mut manifest = RunManifest::new("eval", threads);
    manifest.add_artifact(&args.report);
    manifest.add_artifact(&csv_path);
    manifest.wall_clock_ms = start.elapsed().as_millis();
    let manifest_path = args.report.with_file_name(format!(
        "{}.manifest.json",
        args.report.file_stem().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    manifest.write(&manifest_path)?;
    Ok(())
}

fn cmd_inspect_metric(args: &InspectArgs, threads: Option<usize>) -> Result<(), CmdError> {
    let start = Instant::now();
    let (state, _) = load_checkpoint(&args.checkpoint)?;
    let l = state.kernel.dim();
    let names: Vec<String> = (0..l).map(|i| format!("label_{i}")).collect();

    let stem = args.out.display().to_string();
    let s_path = PathBuf::from(format!("{stem}-s.csv"));
    let m_path = PathBuf::from(format!("{stem}-m.csv"));
    let corr_path = PathBuf::from(format!("{stem}-correlation.csv"));

    std::fs::write(&s_path, matrix_to_csv(state.kernel.entries(), &names))?;
    std::fs::write(&m_path, matrix_to_csv(state.cost.entries(), &names))?;

    // Correlation view: affine rescale of −M into [−1, 1], so zero cost
    // maps to 1 and the largest cost maps to −1.
    let max = state.cost.max_entry();
    let corr = state.cost.entries().mapv(|v| {
        if max > 0.0 {
            1.0 - 2.0 * v / max
        } else {
            1.0
        }
    });
    let mut corr_csv =
        String::from("# correlation view: 1 - 2 * M / max(M); 1 = identical, -1 = most distant\n");
    corr_csv.push_str(&matrix_to_csv(&corr, &names));
    std::fs::write(&corr_path, corr_csv)?;

    let mut manifest = RunManifest::new("inspect-metric", threads);
    manifest.add_artifact(&s_path);
    manifest.add_artifact(&m_path);
    manifest.add_artifact(&corr_path);
    manifest.wall_clock_ms = start.elapsed().as_millis();
    manifest.write(&PathBuf::from(format!("{stem}.manifest.json")))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.or_else(|| {
        std::env::var("M3DN_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args, threads),
        Command::Train(args) => cmd_train(args, threads),
        Command::Eval(args) => cmd_eval(args, threads),
        Command::InspectMetric(args) => cmd_inspect_metric(args, threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
