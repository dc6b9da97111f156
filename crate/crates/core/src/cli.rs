//! `dqweight` subcommands: assess, stats, train, eval, synth.
//!
//! Exit codes: 0 on success, 1 when inputs fail validation, 2 on I/O failure.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::corpus::{self, load_embeddings_any, CorpusError, EmbeddingKind, EmbeddingTable};
use crate::imgqual::decode_luma;
use crate::numfmt::sig9;
use crate::pipeline::{assess, weight_stats, AssessError, PipelineConfig, ScoreRecord};
use crate::relevance::EmbeddingSet;
use crate::synth::{default_degradations, gen_corpus, Degradation, SynthSpec};
use crate::trainer::{
    evaluate, load_features, run_experiment, sentiment_classes, train_count, LinearModel, TrainError,
};
use crate::weighting::{read_weights_csv, write_weights_csv, WeightsFileError};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m.trim_end()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<WeightsFileError> for CliError {
    fn from(e: WeightsFileError) -> Self {
        match &e {
            WeightsFileError::Csv(inner) if inner.is_io_error() => CliError::Io(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<AssessError> for CliError {
    fn from(e: AssessError) -> Self {
        CliError::Validation(e.to_string())
    }
}

fn io_error(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(
    name = "dqweight",
    version,
    about = "Score multimodal aspect-sentiment samples and turn the scores into loss weights"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every sample and write the score report and weights file.
    Assess(AssessArgs),
    /// Print a histogram and summary of the weights in a report.
    Stats(StatsArgs),
    /// Train the reference classifier, weighted and unweighted.
    Train(TrainArgs),
    /// Evaluate a saved model on a features file.
    Eval(EvalArgs),
    /// Generate a synthetic corpus with planted low-quality samples.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct AssessArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory that manifest image paths are relative to.
    #[arg(long)]
    pub images: PathBuf,
    /// OCR sidecar; without it every image counts as text-free.
    #[arg(long)]
    pub ocr: Option<PathBuf>,
    /// Embedding sidecars, one per kind (image, text, aspect).
    #[arg(long, num_args = 1.., required = true)]
    pub embeddings: Vec<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for scores.jsonl, weights.csv and run.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// scores.jsonl or a weights CSV.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

/// Command-line overrides for the `[train]` config section.
#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub l2_reg: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// `id,weight` CSV; omitted means unit weights.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Leading fraction of feature records used for training; the rest is the test split.
    #[arg(long, default_value_t = 2.0 / 3.0)]
    pub train_fraction: f64,
    /// Skip the unit-weight baseline when weights are given.
    #[arg(long)]
    pub no_baseline: bool,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Output directory for model.json and experiment.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Evaluate only the records after the training split.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lowq: f64,
    #[arg(long, default_value_t = 0.3)]
    pub label_noise: f64,
    /// `kind=magnitude`, repeatable. Defaults to downscale=0.4, gaussian_blur=2, ocr_inject=400.
    #[arg(long = "degrade")]
    pub degradations: Vec<Degradation>,
    #[arg(long)]
    pub no_degradations: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub width: u32,
    #[arg(long, default_value_t = 224)]
    pub height: u32,
    #[arg(long, default_value_t = 32)]
    pub embedding_dim: usize,
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            PipelineConfig::from_toml(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))
        }
    }
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut body = String::new();
    for row in rows {
        body.push_str(&serde_json::to_string(row).expect("record serializes"));
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut body = serde_json::to_string_pretty(value).expect("value serializes");
    body.push('\n');
    fs::write(path, body).map_err(|e| io_error(path, e))
}

#[derive(Serialize)]
struct RunMeta<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    unix_time: u64,
    inputs: Vec<&'a Path>,
    config: &'a PipelineConfig,
    samples: usize,
}

fn unix_time() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn cmd_assess(args: &AssessArgs) -> Result<String, CliError> {
    let config = load_config(args.config.as_deref())?;
    let samples = corpus::load_manifest(&args.manifest)?;
    let corpus = match &args.ocr {
        Some(path) => corpus::attach_ocr(samples, path)?,
        None => corpus::corpus_from_ocr(samples, &Default::default()),
    };

    let mut tables: HashMap<EmbeddingKind, EmbeddingTable> = HashMap::new();
    for path in &args.embeddings {
        let table = load_embeddings_any(path)?;
        if tables.contains_key(&table.kind()) {
            return Err(CliError::Validation(format!(
                "{}: a second {} embedding sidecar was given",
                path.display(),
                table.kind()
            )));
        }
        tables.insert(table.kind(), table);
    }
    let table = |kind| {
        tables
            .get(&kind)
            .ok_or_else(|| CliError::Validation(format!("no {kind} embedding sidecar among --embeddings")))
    };
    let set = EmbeddingSet {
        image: table(EmbeddingKind::Image)?,
        text: table(EmbeddingKind::Text)?,
        aspect: table(EmbeddingKind::Aspect)?,
    };

    let load_image = |file: &str| {
        let path = args.images.join(file);
        let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        decode_luma(&bytes).map_err(|e| e.to_string())
    };
    let records = assess(&corpus, load_image, set, &config)?;

    create_dir(&args.out)?;
    write_jsonl(&args.out.join("scores.jsonl"), &records)?;
    let weights_path = args.out.join("weights.csv");
    write_weights_csv(&weights_path, records.iter().map(|r| (r.id.as_str(), r.weight)))
        .map_err(|e| io_error(&weights_path, e))?;

    let mut inputs = vec![args.manifest.as_path(), args.images.as_path()];
    inputs.extend(args.ocr.as_deref());
    inputs.extend(args.embeddings.iter().map(PathBuf::as_path));
    write_json(
        &args.out.join("run.json"),
        &RunMeta {
            tool: "dqweight",
            version: env!("CARGO_PKG_VERSION"),
            command: "assess",
            unix_time: unix_time(),
            inputs,
            config: &config,
            samples: records.len(),
        },
    )?;

    let mean = records.iter().map(|r| r.weight).sum::<f64>() / records.len().max(1) as f64;
    Ok(format!(
        "scored {} samples, mean weight {}\nwrote {}\n",
        records.len(),
        sig9(mean),
        args.out.display()
    ))
}

fn read_report_weights(path: &Path) -> Result<Vec<f64>, CliError> {
    if path.extension().is_some_and(|e| e == "csv") {
        return Ok(read_weights_csv(path)?.into_iter().map(|(_, w)| w).collect());
    }
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let mut weights = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_error(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ScoreRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::Validation(format!("{}: line {}: {e}", path.display(), idx + 1)))?;
        weights.push(record.weight);
    }
    Ok(weights)
}

/// Renders the histogram and summary printed by `stats`.
pub fn render_stats(weights: &[f64], bins: usize) -> String {
    let Some(stats) = weight_stats(weights, bins) else {
        return "no samples\n".to_string();
    };
    let mut out = format!(
        "samples {}\nmean {}\nmedian {}\nmin {}\nmax {}\n",
        stats.count,
        sig9(stats.mean),
        sig9(stats.median),
        sig9(stats.min),
        sig9(stats.max)
    );
    let (lo, hi) = stats.range;
    let width = (hi - lo) / bins as f64;
    let peak = stats.counts.iter().copied().max().unwrap_or(1).max(1);
    for (i, &count) in stats.counts.iter().enumerate() {
        let left = lo + width * i as f64;
        let close = if i + 1 == bins { ']' } else { ')' };
        let bar = "#".repeat((count * 40).div_ceil(peak));
        out.push_str(&format!(
            "[{:.3}, {:.3}{close} {:>8} {bar}\n",
            left,
            left + width,
            count
        ));
    }
    out
}

fn cmd_stats(args: &StatsArgs) -> Result<String, CliError> {
    if args.bins == 0 {
        return Err(CliError::Validation("--bins must be at least 1".into()));
    }
    let weights = read_report_weights(&args.report)?;
    Ok(render_stats(&weights, args.bins))
}

fn train_config(args: &TrainArgs) -> Result<PipelineConfig, CliError> {
    let mut config = load_config(args.config.as_deref())?;
    let o = &args.overrides;
    let t = &mut config.train;
    if let Some(v) = o.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = o.epochs {
        t.epochs = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.l2_reg {
        t.l2_reg = v;
    }
    if let Some(v) = o.seed {
        t.rng_seed = v;
    }
    t.validate()?;
    Ok(config)
}

fn check_fraction(f: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&f) {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "train fraction must lie in [0, 1], got {f}"
        )))
    }
}

fn cmd_train(args: &TrainArgs) -> Result<String, CliError> {
    let config = train_config(args)?;
    check_fraction(args.train_fraction)?;
    let data = load_features(&args.features)?;
    let (train_set, test_set) = data.split(train_count(data.len(), args.train_fraction));

    let weights = match &args.weights {
        None => vec![1.0; train_set.len()],
        Some(path) => {
            let by_id: HashMap<String, f64> = read_weights_csv(path)?.into_iter().collect();
            let missing: Vec<&str> = train_set
                .keys
                .iter()
                .filter(|k| !by_id.contains_key(*k))
                .map(String::as_str)
                .collect();
            if !missing.is_empty() {
                return Err(CliError::Validation(format!(
                    "{}: no weight for {} training sample(s): {}",
                    path.display(),
                    missing.len(),
                    missing.join(", ")
                )));
            }
            train_set.keys.iter().map(|k| by_id[k]).collect()
        }
    };
    let with_baseline = args.weights.is_some() && !args.no_baseline;
    let eval_set = if test_set.is_empty() { &train_set } else { &test_set };
    let experiment = run_experiment(
        &train_set,
        eval_set,
        &weights,
        &sentiment_classes(),
        with_baseline,
        &config.train,
    )?;

    create_dir(&args.out)?;
    experiment.model.save(&args.out.join("model.json"))?;
    if let Some(base) = &experiment.baseline_model {
        base.save(&args.out.join("model_baseline.json"))?;
    }
    write_json(&args.out.join("experiment.json"), &experiment.report)?;

    let r = &experiment.report;
    let mut out = format!(
        "train {} / test {}\naccuracy {}\nmacro_f1 {}\n",
        train_set.len(),
        test_set.len(),
        sig9(r.weighted.accuracy),
        sig9(r.weighted.macro_f1)
    );
    if let (Some(base), Some(da)) = (&r.baseline, r.delta_accuracy) {
        out.push_str(&format!(
            "baseline accuracy {}\nbaseline macro_f1 {}\ndelta accuracy {}\n",
            sig9(base.accuracy),
            sig9(base.macro_f1),
            sig9(da)
        ));
    }
    Ok(out)
}

fn cmd_eval(args: &EvalArgs) -> Result<String, CliError> {
    let model = LinearModel::load(&args.model)?;
    let data = load_features(&args.features)?;
    let data = match args.train_fraction {
        Some(f) => {
            check_fraction(f)?;
            data.split(train_count(data.len(), f)).1
        }
        None => data,
    };
    let report = evaluate(&model, data.features.view(), &data.labels)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    let mut text = format!(
        "accuracy {}\nmacro_f1 {}\n",
        sig9(report.accuracy),
        sig9(report.macro_f1)
    );
    for (class, f1) in &report.per_class_f1 {
        text.push_str(&format!("f1[{class}] {}\n", sig9(*f1)));
    }
    Ok(text)
}

fn cmd_synth(args: &SynthArgs) -> Result<String, CliError> {
    let degradations = if args.no_degradations {
        Vec::new()
    } else if args.degradations.is_empty() {
        default_degradations()
    } else {
        args.degradations.clone()
    };
    let spec = SynthSpec {
        n_samples: args.n,
        feature_dim: args.dim,
        n_classes: args.classes,
        lowq_fraction: args.lowq,
        label_noise_p: args.label_noise,
        degradations,
        rng_seed: args.seed,
        image_width: args.width,
        image_height: args.height,
        embedding_dim: args.embedding_dim,
        ..Default::default()
    };
    spec.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    let (corpus, _) = gen_corpus(&spec, &args.out).map_err(|e| match e {
        crate::synth::SynthError::IoFailure { .. } => CliError::Io(e.to_string()),
        other => CliError::Validation(other.to_string()),
    })?;
    let lowq = corpus.truth.iter().filter(|t| t.low_quality).count();
    Ok(format!(
        "generated {} samples ({} low quality) in {}\n",
        corpus.samples.len(),
        lowq,
        args.out.display()
    ))
}

/// Runs a parsed command, returning the text to print on success.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Assess(a) => cmd_assess(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(text) => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
