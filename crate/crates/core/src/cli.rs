//! Command-line front end: `gen-data`, `train`, `eval`, `gradcheck` and
//! `compare-fusion`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 gradient check
//! above tolerance.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cells::CellKind;
use crate::data::{self, Dataset, FusionStrategy, Split, TaskConfig};
use crate::gradcheck::{check_random_model, suite_config, GradCheckResult, FD_STEP};
use crate::network::{Model, ModelConfig};
use crate::textfmt;
use crate::training::{
    evaluate, load_checkpoint, save_checkpoint, train, EpochRecord, TrainConfig, TrainingMetadata,
};

/// Environment variable capping the worker threads of `compare-fusion`.
pub const THREADS_ENV: &str = "FUSION_LSTM_THREADS";

pub const REPORT_FORMAT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "fusion-lstm",
    version,
    about = "Multi-input LSTM cells (gate- and state-level fusion) on a synthetic two-stream task",
    arg_required_else_help = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phase-coupled dataset directory.
    GenData(GenDataArgs),
    /// Train one model and write its checkpoint and history.
    Train(TrainArgs),
    /// Rank-1 accuracy of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Whole-model finite-difference gradient check.
    Gradcheck(GradcheckArgs),
    /// Train every fusion strategy on one dataset and write a comparison report.
    CompareFusion(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Embedding dimension per step.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Sequence length.
    #[arg(long, default_value_t = 15)]
    pub steps: usize,
    /// Cycles over the sequence.
    #[arg(long, default_value_t = 2.0)]
    pub frequency: f64,
    /// Noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 200)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub valid_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Overwrite an existing dataset directory.
    #[arg(long)]
    pub force: bool,
}

impl GenDataArgs {
    pub fn task(&self) -> TaskConfig {
        TaskConfig {
            num_classes: self.classes,
            dim: self.dim,
            steps: self.steps,
            frequency: self.frequency,
            noise_sigma: self.noise,
            train_per_class: self.train_per_class,
            valid_per_class: self.valid_per_class,
            test_per_class: self.test_per_class,
            seed: self.seed,
        }
    }
}

/// Architecture flags shared by `train` and `compare-fusion`.
#[derive(Debug, Clone, Args)]
pub struct ArchArgs {
    /// Hidden units per direction.
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    /// Bi-directional encoder (default).
    #[arg(long, overrides_with = "unidirectional")]
    pub bidirectional: bool,
    /// Forward-only encoder.
    #[arg(long, overrides_with = "bidirectional")]
    pub unidirectional: bool,
    /// Attention pooling (default).
    #[arg(long, overrides_with = "no_attention")]
    pub attention: bool,
    /// Mean pooling instead of attention.
    #[arg(long, overrides_with = "attention")]
    pub no_attention: bool,
}

impl ArchArgs {
    pub fn is_bidirectional(&self) -> bool {
        !self.unidirectional
    }

    pub fn has_attention(&self) -> bool {
        !self.no_attention
    }

    fn model_config(&self, cell: CellKind, fusion: FusionStrategy, task: &TaskConfig) -> ModelConfig {
        ModelConfig {
            cell,
            fusion,
            input_dim: task.dim,
            hidden: self.hidden,
            steps: task.steps,
            bidirectional: self.is_bidirectional(),
            attention: self.has_attention(),
            dropout: self.dropout,
            num_classes: task.num_classes,
        }
    }
}

/// Optimization flags shared by `train` and `compare-fusion`.
#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    /// Mini-batch size.
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// RMSprop learning rate.
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    /// RMSprop decay.
    #[arg(long, default_value_t = 0.9)]
    pub rho: f64,
    /// RMSprop epsilon.
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    /// Model initialization seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Shuffle/dropout seed (defaults to --seed).
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Keep the dataset order fixed.
    #[arg(long)]
    pub no_shuffle: bool,
}

impl OptimArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            decay: self.rho,
            epsilon: self.epsilon,
            seed: self.train_seed.unwrap_or(self.seed),
            shuffle: !self.no_shuffle,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.json and history.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Cell architecture: conv, glf or slf.
    #[arg(long, default_value = "glf", value_parser = parse_cell)]
    pub cell: CellKind,
    /// joint (glf/slf) or none_h, none_v, feat1, feat2, score (conv).
    /// Defaults to joint for fused cells and feat1 for conv.
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<FusionStrategy>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, valid or test.
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "glf", value_parser = parse_cell)]
    pub cell: CellKind,
    /// Maximum tolerated relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Number of random model instances.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = FD_STEP)]
    pub step: f64,
    /// Also write the results as a JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory: report.json, timings.json and one checkpoint per run.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of runs (glf, slf, none_h, none_v, feat1, feat2, score).
    #[arg(long, value_delimiter = ',')]
    pub only: Option<Vec<String>>,
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

fn parse_cell(s: &str) -> Result<CellKind, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_fusion(s: &str) -> Result<FusionStrategy, String> {
    s.parse().map_err(|e: crate::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| format!("unknown split `{s}` (valid: train, valid, test)"))
}

/// Error classes that map onto distinct exit codes.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
    Tolerance,
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_from_args<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return if code == 0 { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match run(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_RUNTIME
        }
        Err(Failure::Tolerance) => EXIT_GRADCHECK,
    }
}

fn run(cmd: Command, out: &mut dyn Write) -> Result<(), Failure> {
    match cmd {
        Command::GenData(a) => gen_data(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Eval(a) => eval_cmd(&a, out),
        Command::Gradcheck(a) => gradcheck_cmd(&a, out),
        Command::CompareFusion(a) => compare_cmd(&a, out),
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let task = a.task();
    task.validate().map_err(usage)?;
    if data::dataset_exists(&a.out) && !a.force {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "{} already contains a dataset (use --force to overwrite)",
            a.out.display()
        )));
    }
    let ds = data::generate_dataset(&task, &a.out)?;
    writeln!(
        out,
        "wrote {} train / {} valid / {} test records to {}",
        ds.train.len(),
        ds.valid.len(),
        ds.test.len(),
        a.out.display()
    )
    .context("writing to stdout")?;
    Ok(())
}

fn check_arch(arch: &ArchArgs, optim: &OptimArgs) -> Result<(), Failure> {
    if arch.hidden == 0 {
        return Err(usage("--hidden must be at least 1"));
    }
    if !(0.0..1.0).contains(&arch.dropout) {
        return Err(usage(format!("--dropout {} outside [0, 1)", arch.dropout)));
    }
    optim.train_config().validate().map_err(usage)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HistoryDoc {
    format_version: u32,
    config: ModelConfig,
    training: TrainConfig,
    history: Vec<EpochRecord>,
}

fn train_cmd(a: &TrainArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let fusion = a.fusion.unwrap_or(if a.cell == CellKind::Conventional {
        FusionStrategy::Feat1
    } else {
        FusionStrategy::Joint
    });
    fusion.check(a.cell).map_err(usage)?;
    check_arch(&a.arch, &a.optim)?;

    let ds = data::load_dataset(&a.data)?;
    let config = a.arch.model_config(a.cell, fusion, &ds.task);
    let tc = a.optim.train_config();
    let run = train_one(&ds, config, &tc, a.optim.seed)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    run.save(&a.out)?;
    writeln!(
        out,
        "trained {}/{}: final loss {:.6}, valid accuracy {:.4}, test accuracy {:.4} ({}/{})",
        a.cell,
        fusion,
        run.metadata.final_train_loss.unwrap_or(f64::NAN),
        run.metadata.final_valid_accuracy.unwrap_or(f64::NAN),
        run.test.accuracy,
        run.test.correct,
        run.test.total
    )
    .context("writing to stdout")?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = data::load_dataset(&a.data)?;
    let ev = evaluate(&ck.model, ds.split(a.split))?;
    writeln!(
        out,
        "rank-1 accuracy {:.4} ({}/{}) on {}",
        ev.accuracy,
        ev.correct,
        ev.total,
        a.split.name()
    )
    .context("writing to stdout")?;
    Ok(())
}

/// Gradient-check results for one cell kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub format_version: u32,
    pub cell: CellKind,
    pub config: ModelConfig,
    pub step: f64,
    pub tolerance: f64,
    pub seeds: Vec<u64>,
    pub results: Vec<GradCheckResult>,
    pub max_rel_error: f64,
    pub passed: bool,
}

pub fn run_gradcheck(cell: CellKind, seeds: u64, step: f64, tol: f64) -> crate::Result<GradcheckReport> {
    let config = suite_config(cell);
    let seeds: Vec<u64> = (0..seeds).collect();
    let results = seeds
        .iter()
        .map(|&s| check_random_model(config.clone(), s, step))
        .collect::<crate::Result<Vec<_>>>()?;
    let max = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        format_version: REPORT_FORMAT_VERSION,
        cell,
        config,
        step,
        tolerance: tol,
        seeds,
        results,
        max_rel_error: max,
        passed: max < tol,
    })
}

fn gradcheck_cmd(a: &GradcheckArgs, out: &mut dyn Write) -> Result<(), Failure> {
    if !(a.tol > 0.0) || !(a.step > 0.0) || a.seeds == 0 {
        return Err(usage("--tol and --step must be positive and --seeds at least 1"));
    }
    let report = run_gradcheck(a.cell, a.seeds, a.step, a.tol)?;
    for (seed, r) in report.seeds.iter().zip(&report.results) {
        writeln!(
            out,
            "{} seed {seed}: max relative error {:.3e} over {} parameters (worst {})",
            a.cell, r.max_rel_error, r.checked, r.worst_param
        )
        .context("writing to stdout")?;
    }
    writeln!(
        out,
        "{}: max relative error {:.3e} (tolerance {:.1e}) {}",
        a.cell,
        report.max_rel_error,
        a.tol,
        if report.passed { "PASS" } else { "FAIL" }
    )
    .context("writing to stdout")?;
    if let Some(path) = &a.report {
        textfmt::write_pretty(&report, path)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Tolerance)
    }
}

/// A trained model plus its evaluation.
pub struct TrainedRun {
    pub model: Model,
    pub optimizer: crate::training::RmspropState,
    pub metadata: TrainingMetadata,
    pub training: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub test: crate::training::Evaluation,
    pub seconds: f64,
}

impl TrainedRun {
    /// Writes `checkpoint.json` and `history.json` into `dir`.
    pub fn save(&self, dir: &Path) -> crate::Result<()> {
        save_checkpoint(
            &self.model,
            Some(&self.optimizer),
            &self.metadata,
            &dir.join("checkpoint.json"),
        )?;
        let hist = HistoryDoc {
            format_version: REPORT_FORMAT_VERSION,
            config: self.model.config.clone(),
            training: self.training.clone(),
            history: self.history.clone(),
        };
        textfmt::write_pretty(&hist, &dir.join("history.json"))
    }
}

/// Initializes a model from `model_seed`, trains it on `ds.train` and
/// evaluates it on `ds.test`.
pub fn train_one(
    ds: &Dataset,
    config: ModelConfig,
    tc: &TrainConfig,
    model_seed: u64,
) -> crate::Result<TrainedRun> {
    let start = Instant::now();
    let mut model = Model::init(config, model_seed)?;
    let outcome = train(&mut model, &ds.train, &ds.valid, tc)?;
    let test = evaluate(&model, &ds.test)?;
    let last = outcome.history.last();
    let metadata = TrainingMetadata {
        model_seed,
        data_seed: ds.task.seed,
        train_seed: tc.seed,
        epochs: tc.epochs,
        final_train_loss: last.map(|h| h.train_loss),
        final_valid_accuracy: last.and_then(|h| h.valid_accuracy),
    };
    Ok(TrainedRun {
        model,
        optimizer: outcome.optimizer,
        metadata,
        training: tc.clone(),
        history: outcome.history,
        test,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// One configuration of the fusion comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionRun {
    pub name: &'static str,
    pub cell: CellKind,
    pub fusion: FusionStrategy,
}

/// Joint runs for both fused cells, then the five conventional baselines.
pub const FUSION_RUNS: [FusionRun; 7] = [
    FusionRun { name: "glf", cell: CellKind::Glf, fusion: FusionStrategy::Joint },
    FusionRun { name: "slf", cell: CellKind::Slf, fusion: FusionStrategy::Joint },
    FusionRun { name: "none_h", cell: CellKind::Conventional, fusion: FusionStrategy::NoneH },
    FusionRun { name: "none_v", cell: CellKind::Conventional, fusion: FusionStrategy::NoneV },
    FusionRun { name: "feat1", cell: CellKind::Conventional, fusion: FusionStrategy::Feat1 },
    FusionRun { name: "feat2", cell: CellKind::Conventional, fusion: FusionStrategy::Feat2 },
    FusionRun { name: "score", cell: CellKind::Conventional, fusion: FusionStrategy::Score },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub model: u64,
    pub train: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden: usize,
    pub dropout: f64,
    pub bidirectional: bool,
    pub attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub name: String,
    pub cell: CellKind,
    pub fusion: FusionStrategy,
    pub parameters: usize,
    pub test_accuracy: f64,
    pub test_correct: usize,
    pub test_total: usize,
    pub valid_accuracy: Option<f64>,
    pub final_train_loss: Option<f64>,
    /// Checkpoint path relative to the report directory.
    pub checkpoint: String,
}

/// The fusion comparison. Contains no timings, so identical runs produce
/// identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub format_version: u32,
    pub task: TaskConfig,
    pub seeds: Seeds,
    pub architecture: Architecture,
    pub training: TrainConfig,
    pub results: Vec<RunResult>,
}

impl FusionReport {
    pub fn result(&self, name: &str) -> Option<&RunResult> {
        self.results.iter().find(|r| r.name == name)
    }
}

pub fn write_report<T: Serialize>(report: &T, path: &Path) -> crate::Result<()> {
    textfmt::write_pretty(report, path)
}

/// Worker count: `FUSION_LSTM_THREADS` if set, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains every selected run on `ds` with shared seeds. Runs may execute
/// concurrently; results are assembled in `runs` order. When `out_dir` is
/// given each run's checkpoint and history go to `out_dir/<name>/`.
pub fn compare_fusion(
    ds: &Dataset,
    arch: &Architecture,
    tc: &TrainConfig,
    model_seed: u64,
    runs: &[FusionRun],
    out_dir: Option<&Path>,
    threads: usize,
) -> crate::Result<(FusionReport, Vec<(String, f64)>)> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<crate::Result<TrainedRun>>>> =
        Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(runs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= runs.len() {
                    break;
                }
                let r = runs[i];
                let config = ModelConfig {
                    cell: r.cell,
                    fusion: r.fusion,
                    input_dim: ds.task.dim,
                    hidden: arch.hidden,
                    steps: ds.task.steps,
                    bidirectional: arch.bidirectional,
                    attention: arch.attention,
                    dropout: arch.dropout,
                    num_classes: ds.task.num_classes,
                };
                let result = train_one(ds, config, tc, model_seed).and_then(|run| {
                    if let Some(dir) = out_dir {
                        let sub = dir.join(r.name);
                        std::fs::create_dir_all(&sub).map_err(|e| crate::Error::io(&sub, e))?;
                        run.save(&sub)?;
                    }
                    Ok(run)
                });
                slots.lock().expect("no worker panicked")[i] = Some(result);
            });
        }
    });

    let mut results = Vec::new();
    let mut timings = Vec::new();
    for (r, slot) in runs.iter().zip(slots.into_inner().expect("no worker panicked")) {
        let run = slot.expect("every run executed")?;
        timings.push((r.name.to_string(), run.seconds));
        results.push(RunResult {
            name: r.name.to_string(),
            cell: r.cell,
            fusion: r.fusion,
            parameters: crate::params::Parameters::num_params(&run.model.params),
            test_accuracy: run.test.accuracy,
            test_correct: run.test.correct,
            test_total: run.test.total,
            valid_accuracy: run.metadata.final_valid_accuracy,
            final_train_loss: run.metadata.final_train_loss,
            checkpoint: format!("{}/checkpoint.json", r.name),
        });
    }
    let report = FusionReport {
        format_version: REPORT_FORMAT_VERSION,
        task: ds.task.clone(),
        seeds: Seeds {
            data: ds.task.seed,
            model: model_seed,
            train: tc.seed,
        },
        architecture: arch.clone(),
        training: tc.clone(),
        results,
    };
    Ok((report, timings))
}

fn compare_cmd(a: &CompareArgs, out: &mut dyn Write) -> Result<(), Failure> {
    check_arch(&a.arch, &a.optim)?;
    let runs: Vec<FusionRun> = match &a.only {
        None => FUSION_RUNS.to_vec(),
        Some(names) => {
            let mut v = Vec::new();
            for n in names {
                match FUSION_RUNS.iter().find(|r| r.name == n) {
                    Some(r) => v.push(*r),
                    None => {
                        return Err(usage(format!(
                            "unknown run `{n}` (valid: glf, slf, none_h, none_v, feat1, feat2, score)"
                        )))
                    }
                }
            }
            v
        }
    };
    let ds = data::load_dataset(&a.data)?;
    let arch = Architecture {
        hidden: a.arch.hidden,
        dropout: a.arch.dropout,
        bidirectional: a.arch.is_bidirectional(),
        attention: a.arch.has_attention(),
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let start = Instant::now();
    let (report, timings) = compare_fusion(
        &ds,
        &arch,
        &a.optim.train_config(),
        a.optim.seed,
        &runs,
        Some(&a.out),
        thread_count(),
    )?;
    write_report(&report, &a.out.join("report.json"))?;
    let mut timing_doc: std::collections::BTreeMap<String, f64> = timings.into_iter().collect();
    let total = start.elapsed().as_secs_f64();
    timing_doc.insert("total".into(), total);
    write_report(&timing_doc, &a.out.join("timings.json"))?;
    for r in &report.results {
        writeln!(
            out,
            "{:<7} {:<5} {:<7} test {:.4} ({}/{}) {:>6.1}s",
            r.name,
            r.cell.name(),
            r.fusion.name(),
            r.test_accuracy,
            r.test_correct,
            r.test_total,
            timing_doc.get(&r.name).copied().unwrap_or(0.0)
        )
        .context("writing to stdout")?;
    }
    writeln!(out, "total {:.1}s; report at {}", total, a.out.join("report.json").display())
        .context("writing to stdout")?;
    Ok(())
}
