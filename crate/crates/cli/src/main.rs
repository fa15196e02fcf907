use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use sdq_core::analysis::{
    bit_sweep, compression_csv, compression_report, comparison_csv, errors_csv, histograms_csv, layer_error_stats,
    method_comparison, sweep_csv,
};
use sdq_core::checkpoint::Checkpoint;
use sdq_core::config::{load_config, Regime, TrainConfig};
use sdq_core::data::{generate_classification_task, generate_tagging_task, Dataset, Split};
use sdq_core::train::{
    evaluate, grid_search, log_csv, results_csv, train_student, train_teacher, EvalMode, RunResult, TrainOutcome,
};
use sdq_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sdq", version, about = "Self-distilled quantization experiments on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenData),
    /// Fine-tune a full-precision teacher.
    TrainTeacher(TrainTeacher),
    /// Train a quantization-aware student.
    TrainStudent(TrainStudent),
    /// Train one student per (alpha, beta) and keep the best on dev.
    GridSearch(GridSearch),
    /// Accuracy of a checkpoint on one split.
    Evaluate(Evaluate),
    /// Post-training affine quantization of a checkpoint.
    Quantize(Quantize),
    /// Accuracy at FP32 and at each bit width.
    SweepBits(SweepBits),
    /// Per-layer quantization error between two checkpoints.
    AnalyzeError(AnalyzeError),
    /// Storage accounting of a quantized checkpoint against its FP32 source.
    CompressionReport(CompressionReport),
    /// Compare regimes over saved run results.
    Compare(Compare),
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Sentence,
    Token,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long, value_enum, default_value = "sentence")]
    task: TaskArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    size: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    len: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Per-step loss log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// RunResult as JSON.
    #[arg(long)]
    result: Option<PathBuf>,
}

#[derive(Args)]
struct TrainTeacher {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainStudent {
    #[command(flatten)]
    common: Common,
    /// Overrides `train.regime`.
    #[arg(long)]
    regime: Option<String>,
    /// Teacher checkpoint; falls back to `train.teacher`.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Quantized student checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Also write the full-precision student weights.
    #[arg(long)]
    fp32_out: Option<PathBuf>,
}

#[derive(Args)]
struct GridSearch {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    alphas: Vec<f32>,
    #[arg(long, value_delimiter = ',', required = true)]
    betas: Vec<f32>,
    /// Quantized checkpoint of the best run.
    #[arg(long)]
    out: PathBuf,
    /// One row per grid point.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// `fp32`, `fake:N` or `real:N`.
    #[arg(long, default_value = "fp32")]
    mode: String,
}

#[derive(Args)]
struct Quantize {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 8)]
    bits: u8,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepBits {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_delimiter = ',', default_value = "8,4,2")]
    bits: Vec<u8>,
    /// Use packed integer round trips instead of fake quantization.
    #[arg(long)]
    real: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeError {
    #[arg(long)]
    fp32: PathBuf,
    #[arg(long)]
    quant: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-kind error histograms.
    #[arg(long)]
    histograms: Option<PathBuf>,
}

#[derive(Args)]
struct CompressionReport {
    #[arg(long)]
    fp32: PathBuf,
    #[arg(long)]
    quant: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Compare {
    /// RunResult JSON files, each holding one result or an array.
    #[arg(long, num_args = 1.., required = true)]
    results: Vec<PathBuf>,
    /// Tolerance on the expected ordering of means.
    #[arg(long, default_value_t = 0.0)]
    slack: f64,
    #[arg(long)]
    out: PathBuf,
}

fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn config(common: &Common, regime: Option<&str>) -> Result<TrainConfig> {
    let mut c = match &common.config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.train.seed = seed;
    }
    if let Some(r) = regime {
        c.train.regime = Regime::parse(r).ok_or_else(|| invalid("regime", format!("unknown regime '{r}'")))?;
    }
    c.validate()?;
    Ok(c)
}

fn teacher(path: Option<&PathBuf>, c: &TrainConfig) -> Result<Option<Checkpoint>> {
    match path.cloned().or_else(|| c.train.teacher.as_ref().map(PathBuf::from)) {
        Some(p) => Ok(Some(Checkpoint::load(&p)?)),
        None => Ok(None),
    }
}

fn emit_run(common: &Common, outcome: &TrainOutcome) -> Result<serde_json::Value> {
    if let Some(p) = &common.log {
        write(p, &log_csv(&outcome.log))?;
    }
    let value = serde_json::to_value(&outcome.result)?;
    if let Some(p) = &common.result {
        write(p, &(serde_json::to_string_pretty(&value)? + "\n"))?;
    }
    Ok(value)
}

fn run(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::GenData(a) => {
            let ds = match a.task {
                TaskArg::Sentence => generate_classification_task(a.seed, a.size, a.vocab, a.len, a.classes)?,
                TaskArg::Token => generate_tagging_task(a.seed, a.size, a.vocab, a.len, a.classes)?,
            };
            ds.save(&a.out)?;
            Ok(json!({"out": a.out, "train": ds.train.len(), "dev": ds.dev.len(), "test": ds.test.len()}))
        }
        Command::TrainTeacher(a) => {
            let c = config(&a.common, None)?;
            let ds = Dataset::load(&a.common.data)?;
            let outcome = train_teacher(&c, &ds)?;
            outcome.fp32.save(&a.out)?;
            emit_run(&a.common, &outcome)
        }
        Command::TrainStudent(a) => {
            let c = config(&a.common, a.regime.as_deref())?;
            let ds = Dataset::load(&a.common.data)?;
            let t = teacher(a.teacher.as_ref(), &c)?;
            let outcome = train_student(&c, t.as_ref(), &ds)?;
            outcome.quantized.save(&a.out)?;
            if let Some(p) = &a.fp32_out {
                outcome.fp32.save(p)?;
            }
            emit_run(&a.common, &outcome)
        }
        Command::GridSearch(a) => {
            let c = config(&a.common, a.regime.as_deref())?;
            let ds = Dataset::load(&a.common.data)?;
            let t = teacher(a.teacher.as_ref(), &c)?;
            let grid = grid_search(&c, &a.alphas, &a.betas, t.as_ref(), &ds)?;
            grid.best_outcome.quantized.save(&a.out)?;
            if let Some(p) = &a.table {
                write(p, &results_csv(&grid.table))?;
            }
            emit_run(&a.common, &grid.best_outcome)
        }
        Command::Evaluate(a) => {
            let ckpt = Checkpoint::load(&a.input)?;
            let ds = Dataset::load(&a.data)?;
            let mode = EvalMode::parse(&a.mode)?;
            let accuracy = evaluate(&ckpt, ds.split(a.split.into()), mode)?;
            let tensors: Vec<_> = ckpt
                .records()
                .map(|(n, r)| json!({"name": n, "storage": r.storage.name(), "shape": r.storage.shape()}))
                .collect();
            Ok(json!({"accuracy": accuracy, "mode": mode.to_string(), "tensors": tensors}))
        }
        Command::Quantize(a) => {
            let ckpt = Checkpoint::load(&a.input)?;
            let q = ckpt.quantize_affine(a.bits)?;
            q.save(&a.out)?;
            Ok(json!({"out": a.out, "bits": a.bits}))
        }
        Command::SweepBits(a) => {
            let ckpt = Checkpoint::load(&a.input)?;
            let ds = Dataset::load(&a.data)?;
            let rows = bit_sweep(&ckpt, &a.bits, ds.split(a.split.into()), a.real)?;
            write(&a.out, &sweep_csv(&[(ckpt.metadata.seed, rows.clone())]))?;
            Ok(serde_json::to_value(rows)?)
        }
        Command::AnalyzeError(a) => {
            let report = layer_error_stats(&Checkpoint::load(&a.fp32)?, &Checkpoint::load(&a.quant)?)?;
            write(&a.out, &errors_csv(&report))?;
            if let Some(p) = &a.histograms {
                write(p, &histograms_csv(&report))?;
            }
            Ok(json!({
                "rows": report.rows.len(),
                "largest_error_kind": report.largest_error_kind.map(|k| k.as_str()),
                "output_has_largest_error": report.output_has_largest_error(),
            }))
        }
        Command::CompressionReport(a) => {
            let rep = compression_report(&Checkpoint::load(&a.fp32)?, &Checkpoint::load(&a.quant)?)?;
            write(&a.out, &compression_csv(&rep))?;
            Ok(json!({
                "fp32_bytes": rep.fp32_total,
                "quant_bytes": rep.quant_total,
                "ratio": rep.ratio,
                "predicted_ratio": rep.predicted_ratio,
                "discrepancy": rep.discrepancy,
            }))
        }
        Command::Compare(a) => {
            let mut results = Vec::new();
            for p in &a.results {
                let value: serde_json::Value = serde_json::from_str(&read(p)?)?;
                match value {
                    serde_json::Value::Array(items) => {
                        for item in items {
                            results.push(serde_json::from_value::<RunResult>(item)?);
                        }
                    }
                    other => results.push(serde_json::from_value(other)?),
                }
            }
            let c = method_comparison(&results, a.slack)?;
            write(&a.out, &comparison_csv(&c))?;
            Ok(serde_json::to_value(&c.orderings)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            // a closed stdout (e.g. piped into `head`) is not a failure
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}
