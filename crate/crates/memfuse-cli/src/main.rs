//! Operator command line: dataset generation, training, evaluation,
//! ablation, factor analysis, and candidate reranking.
//!
//! Conventions:
//! - stdout carries exactly one machine-readable JSON summary line per
//!   run; human-readable progress goes to stderr;
//! - every run writes `run.json` (resolved configuration + versions,
//!   no timestamps) into its output directory;
//! - exit codes: 0 ok, 2 usage/validation, 3 runtime/numeric failure;
//! - `MEMFUSE_THREADS` caps ablation worker parallelism.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use memfuse::data::{
    generate_synthetic, load_dataset, Manifest, Modality, Sample, SyntheticSpec,
};
use memfuse::insight::{
    factor_analysis, render_factor_report, render_rerank_report, rerank, InsightError,
    ReportFormat,
};
use memfuse::model::{build, deserialize, serialize, ModelConfig, ModelParams};
use memfuse::train::{
    ablation_csv, ablation_suite, evaluate_model, predict_all, train, TrainConfig, TrainError,
};

const USAGE_EXIT: u8 = 2;
const RUNTIME_EXIT: u8 = 3;

#[derive(Parser)]
#[command(
    name = "memfuse",
    version,
    about = "Multimodal attention-fusion memorability pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a planted cross-modal signal.
    GenSynthetic(GenSyntheticArgs),
    /// Train a predictor from manifests.
    Train(TrainArgs),
    /// Report Spearman ρ and MSE of a checkpoint on a labeled manifest.
    Evaluate(EvalArgs),
    /// Write per-sample scores for a manifest.
    Predict(EvalArgs),
    /// Train and compare all modality subsets and attention modes.
    Ablate(TrainArgs),
    /// Content-factor analysis of predictions against metadata.
    Analyze(EvalArgs),
    /// Rerank candidate variants with the checkpoint as judge.
    Rank(EvalArgs),
}

#[derive(Args)]
struct GenSyntheticArgs {
    /// Training-set size; validation and test each get n/8.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Embedding widths as video,audio,text.
    #[arg(long, default_value = "12,8,12")]
    dims: String,
    /// Noise scale σ orthogonal to the planted directions.
    #[arg(long, default_value_t = 0.25)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config file: {"model": {...}, "train": {...}}.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    train_manifest: PathBuf,
    #[arg(long)]
    val_manifest: PathBuf,
    /// Overrides the config file's train seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE_EXIT,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: RUNTIME_EXIT,
            message: message.into(),
        }
    }
}

impl From<memfuse::data::DataError> for CliError {
    fn from(e: memfuse::data::DataError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<memfuse::model::ModelError> for CliError {
    fn from(e: memfuse::model::ModelError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient => {
                CliError::runtime(e.to_string())
            }
            TrainError::Variant { source, .. } => match source.as_ref() {
                TrainError::Diverged { .. } | TrainError::NonFiniteGradient => {
                    CliError::runtime(e.to_string())
                }
                _ => CliError::usage(e.to_string()),
            },
            _ => CliError::usage(e.to_string()),
        }
    }
}

impl From<InsightError> for CliError {
    fn from(e: InsightError) -> Self {
        CliError::usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::usage(format!("io error: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenSynthetic(args) => gen_synthetic(args),
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Predict(args) => run_predict(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Analyze(args) => run_analyze(args),
        Command::Rank(args) => run_rank(args),
    };
    match outcome {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

/// Persists the resolved configuration and tool/format versions.
fn write_run_record(out_dir: &Path, command: &str, resolved: Value) -> Result<(), CliError> {
    let record = json!({
        "command": command,
        "versions": {
            "memfuse": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": memfuse::model::CHECKPOINT_VERSION,
            "embedding_format": memfuse::data::memb::VERSION,
        },
        "resolved": resolved,
    });
    let mut text = serde_json::to_string_pretty(&record).expect("record serializes");
    text.push('\n');
    fs::write(out_dir.join("run.json"), text)?;
    Ok(())
}

fn ensure_out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::usage(format!("cannot create output dir {path:?}: {e}")))
}

fn parse_dims(dims: &str) -> Result<BTreeMap<Modality, usize>, CliError> {
    let parts: Vec<&str> = dims.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::usage(format!(
            "--dims expects three comma-separated values (video,audio,text), got {dims:?}"
        )));
    }
    let mut out = BTreeMap::new();
    for (modality, raw) in [Modality::Video, Modality::Audio, Modality::Text]
        .into_iter()
        .zip(parts)
    {
        let value: usize = raw
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("--dims entry {raw:?} is not an integer")))?;
        out.insert(modality, value);
    }
    Ok(out)
}

fn gen_synthetic(args: GenSyntheticArgs) -> Result<String, CliError> {
    let dims = parse_dims(&args.dims)?;
    let mut spec = SyntheticSpec::with_defaults(args.seed);
    spec.n_train = args.n;
    spec.n_validation = (args.n / 8).max(1);
    spec.n_test = (args.n / 8).max(1);
    spec.dims = dims;
    spec.noise = args.noise;
    ensure_out_dir(&args.out)?;
    eprintln!(
        "generating {} train / {} validation / {} test samples under {:?}",
        spec.n_train, spec.n_validation, spec.n_test, args.out
    );
    let (manifests, _) = generate_synthetic(&spec, &args.out)?;
    let mut label_min = f64::INFINITY;
    let mut label_max = f64::NEG_INFINITY;
    let mut total = 0usize;
    for manifest in manifests.values() {
        for entry in &manifest.entries {
            let label = entry.label.expect("generator labels every sample");
            label_min = label_min.min(label);
            label_max = label_max.max(label);
            total += 1;
        }
    }
    write_run_record(
        &args.out,
        "gen-synthetic",
        json!({
            "n_train": spec.n_train,
            "n_validation": spec.n_validation,
            "n_test": spec.n_test,
            "dims": spec.dims,
            "seq_len_range": spec.seq_len_range,
            "noise": spec.noise,
            "seed": spec.seed,
        }),
    )?;
    Ok(json!({
        "command": "gen-synthetic",
        "n_total": total,
        "n_train": spec.n_train,
        "n_validation": spec.n_validation,
        "n_test": spec.n_test,
        "label_min": label_min,
        "label_max": label_max,
        "out": args.out,
    })
    .to_string())
}

/// Config file schema for `train` and `ablate`.
#[derive(Deserialize)]
struct FileConfig {
    model: ModelConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn load_file_config(
    path: &Path,
    seed_flag: Option<u64>,
) -> Result<(ModelConfig, TrainConfig), CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {path:?}: {e}")))?;
    let parsed: FileConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("config {path:?}: {e}")))?;
    parsed.model.validate()?;
    let mut tc = parsed.train.unwrap_or_default();
    if let Some(seed) = seed_flag {
        tc.seed = seed; // flags win over the config file
    }
    Ok((parsed.model, tc))
}

fn load_labeled(manifest_path: &Path) -> Result<Vec<Sample>, CliError> {
    let manifest = Manifest::read(manifest_path)?;
    Ok(load_dataset(&manifest)?)
}

fn run_train(args: TrainArgs) -> Result<String, CliError> {
    let (model_config, train_config) = load_file_config(&args.config, args.seed)?;
    let train_set = load_labeled(&args.train_manifest)?;
    let val_set = load_labeled(&args.val_manifest)?;
    ensure_out_dir(&args.out)?;
    if train_config.learning_rate == 0.0 {
        eprintln!("warning: learning_rate is 0; parameters will not change");
    }
    eprintln!(
        "training on {} samples, validating on {} ({} parameters)",
        train_set.len(),
        val_set.len(),
        model_config.parameter_census()
    );
    let params = build(&model_config, train_config.seed)?;
    let (best, log) = train(&model_config, params, &train_set, &val_set, &train_config)?;
    let summary = evaluate_model(&best, &model_config, &val_set)?;

    let checkpoint_path = args.out.join("checkpoint.mmem");
    fs::write(&checkpoint_path, serialize(&best, &model_config)?)?;
    fs::write(args.out.join("trainlog.jsonl"), log.to_jsonl())?;
    write_run_record(
        &args.out,
        "train",
        json!({ "model": model_config, "train": train_config }),
    )?;

    let mut summary_json = json!({
        "command": "train",
        "val_mse": summary.mse,
        "val_spearman": summary.spearman,
        "n_val": summary.n,
        "epochs_run": log.epochs.len(),
        "best_epoch": log.best_epoch,
        "stopped_early": log.stopped_early,
        "checkpoint": checkpoint_path,
    });
    if train_config.learning_rate == 0.0 {
        summary_json["note"] = Value::String("learning_rate 0: parameters unchanged".into());
    }
    Ok(summary_json.to_string())
}

fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams), CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::usage(format!("cannot read checkpoint {path:?}: {e}")))?;
    Ok(deserialize(&bytes)?)
}

/// Checks that every configured modality is present in the manifest's
/// samples before scoring.
fn check_modalities(config: &ModelConfig, samples: &[Sample]) -> Result<(), CliError> {
    for sample in samples {
        for m in &config.modalities {
            if !sample.sequences.contains_key(m) {
                return Err(CliError::usage(format!(
                    "sample {} is missing {m} embeddings required by the checkpoint",
                    sample.id
                )));
            }
        }
    }
    Ok(())
}

fn run_evaluate(args: EvalArgs) -> Result<String, CliError> {
    let (config, params) = load_checkpoint(&args.checkpoint)?;
    let samples = load_labeled(&args.manifest)?;
    check_modalities(&config, &samples)?;
    let summary = evaluate_model(&params, &config, &samples)?;
    ensure_out_dir(&args.out)?;
    write_run_record(
        &args.out,
        "evaluate",
        json!({ "checkpoint": args.checkpoint, "manifest": args.manifest, "model": config }),
    )?;
    Ok(json!({
        "command": "evaluate",
        "spearman": summary.spearman,
        "mse": summary.mse,
        "n": summary.n,
    })
    .to_string())
}

fn run_predict(args: EvalArgs) -> Result<String, CliError> {
    let (config, params) = load_checkpoint(&args.checkpoint)?;
    let samples = load_labeled(&args.manifest)?;
    check_modalities(&config, &samples)?;
    let scores = predict_all(&params, &config, &samples)?;
    ensure_out_dir(&args.out)?;
    let mut csv = String::from("id,score\n");
    for (sample, score) in samples.iter().zip(&scores) {
        csv.push_str(&format!("{},{}\n", sample.id, score));
    }
    let csv_path = args.out.join("predictions.csv");
    fs::write(&csv_path, csv)?;
    write_run_record(
        &args.out,
        "predict",
        json!({ "checkpoint": args.checkpoint, "manifest": args.manifest, "model": config }),
    )?;
    Ok(json!({
        "command": "predict",
        "n": samples.len(),
        "out": csv_path,
    })
    .to_string())
}

fn worker_threads() -> usize {
    match std::env::var("MEMFUSE_THREADS") {
        Ok(raw) => raw.parse::<usize>().map(|n| n.max(1)).unwrap_or(1),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1),
    }
}

fn run_ablate(args: TrainArgs) -> Result<String, CliError> {
    let (model_config, train_config) = load_file_config(&args.config, args.seed)?;
    let train_set = load_labeled(&args.train_manifest)?;
    let val_set = load_labeled(&args.val_manifest)?;
    ensure_out_dir(&args.out)?;
    let threads = worker_threads();
    eprintln!(
        "running 12 ablation variants on {threads} worker thread(s), seed {}",
        train_config.seed
    );
    let rows = ablation_suite(&model_config, &train_set, &val_set, &train_config, threads)?;

    let csv = ablation_csv(&rows);
    fs::write(args.out.join("ablation.csv"), &csv)?;
    let mut md =
        String::from("| variant | Spearman ρ | MSE | epochs | seed |\n|---|---|---|---|---|\n");
    for row in &rows {
        let rho = row
            .spearman_rho
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "NA".into());
        md.push_str(&format!(
            "| {} | {} | {:.4} | {} | {} |\n",
            row.variant, rho, row.mse, row.epochs_run, row.seed
        ));
    }
    fs::write(args.out.join("ablation.md"), md)?;
    write_run_record(
        &args.out,
        "ablate",
        json!({ "model": model_config, "train": train_config, "threads": threads }),
    )?;
    Ok(json!({
        "command": "ablate",
        "rows": rows.len(),
        "out": args.out,
    })
    .to_string())
}

fn run_analyze(args: EvalArgs) -> Result<String, CliError> {
    let (config, params) = load_checkpoint(&args.checkpoint)?;
    let samples = load_labeled(&args.manifest)?;
    check_modalities(&config, &samples)?;
    if samples.iter().all(|s| s.metadata.is_none()) {
        return Err(CliError::usage(
            "no metadata: factor analysis needs samples with metadata records",
        ));
    }
    let predictions = predict_all(&params, &config, &samples)?;
    // Permutation p-values are seeded for reproducibility.
    let report = factor_analysis(&samples, &predictions, 0)?;
    ensure_out_dir(&args.out)?;
    fs::write(
        args.out.join("factors.csv"),
        render_factor_report(&report, ReportFormat::Csv),
    )?;
    fs::write(
        args.out.join("factors.md"),
        render_factor_report(&report, ReportFormat::Markdown),
    )?;
    fs::write(
        args.out.join("factors.json"),
        render_factor_report(&report, ReportFormat::Json),
    )?;
    write_run_record(
        &args.out,
        "analyze",
        json!({ "checkpoint": args.checkpoint, "manifest": args.manifest }),
    )?;
    Ok(json!({
        "command": "analyze",
        "factors": report.results.len(),
        "n_samples": report.n_samples,
        "out": args.out,
    })
    .to_string())
}

fn run_rank(args: EvalArgs) -> Result<String, CliError> {
    let (config, params) = load_checkpoint(&args.checkpoint)?;
    let manifest = Manifest::read(&args.manifest)?;
    let samples = load_dataset(&manifest)?;
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();

    let mut items = Vec::new();
    for (entry, sample) in manifest.entries.iter().zip(&samples) {
        let Some(candidate_ids) = &entry.candidates else {
            continue;
        };
        let mut candidates = Vec::with_capacity(candidate_ids.len());
        for id in candidate_ids {
            let candidate = by_id.get(id.as_str()).ok_or_else(|| {
                CliError::usage(format!(
                    "item {}: candidate id {id} not found in manifest",
                    entry.id
                ))
            })?;
            candidates.push((*candidate).clone());
        }
        items.push((sample.clone(), candidates));
    }
    if items.is_empty() {
        return Err(CliError::usage(
            "manifest has no entries with a candidates field; nothing to rank",
        ));
    }
    let report = rerank(&items, &params, &config)?;
    ensure_out_dir(&args.out)?;
    fs::write(
        args.out.join("rerank.csv"),
        render_rerank_report(&report, ReportFormat::Csv),
    )?;
    fs::write(
        args.out.join("rerank.md"),
        render_rerank_report(&report, ReportFormat::Markdown),
    )?;
    fs::write(
        args.out.join("rerank.json"),
        render_rerank_report(&report, ReportFormat::Json),
    )?;
    write_run_record(
        &args.out,
        "rank",
        json!({ "checkpoint": args.checkpoint, "manifest": args.manifest }),
    )?;
    let overall = report.overall.as_ref().map(|r| r.improvement_percent);
    Ok(json!({
        "command": "rank",
        "items": report.items.len(),
        "overall_improvement_percent": overall,
        "out": args.out,
    })
    .to_string())
}
