//! Command-line front end: the experiment runner plus small utilities for
//! generating data, sampling a trained generator, and aggregating reports.
//!
//! Exit codes: 0 on success, 2 for configuration/usage errors, 1 for
//! runtime failures (the error message names the failing stage).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, DataSource, ExperimentConfig};
use crate::continual::run_stream;
use crate::data::{
    class_order_from_seed, load_dataset, make_synthetic, save_dataset, save_unlabeled,
    split_stream, ChannelStats, DataError, SynthSpec, TaskStream,
};
use crate::diffusion::{self, DiffusionModel};
use crate::metrics::{MetricsReport, CSV_HEADER};
use crate::rng::substream;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
}

impl CliError {
    fn stage(stage: &'static str, err: impl std::fmt::Display) -> CliError {
        CliError::Stage {
            stage,
            message: err.to_string(),
        }
    }

    /// Process exit code for this error (config errors are 2, the rest 1).
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

// ── argument surface ────────────────────────────────────────────────────

#[derive(Debug, Parser)]
#[command(
    name = "replayforge",
    version,
    about = "Continual learning on 1-D streams with diffusion-based generative replay"
)]
pub struct Cli {
    /// Override the seed: replaces the config's seed list (run) or the
    /// default generation/sampling seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (run, report) or file (gen-synth, sample).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress lines; results and errors still appear.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a continual-learning experiment described by a TOML config.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
    },
    /// Generate a synthetic labeled dataset file.
    GenSynth(GenSynthArgs),
    /// Draw new samples from a saved generator checkpoint.
    Sample {
        /// Generator checkpoint (`.rftn` with its `.json` manifest).
        checkpoint: PathBuf,
        /// Number of samples to draw.
        #[arg(long, default_value_t = 16)]
        count: usize,
        /// Time steps per channel of each sample.
        #[arg(long, default_value_t = 64)]
        length: usize,
    },
    /// Aggregate run directories into a method comparison table.
    Report {
        /// Directories that each hold a `report.json` from `run`.
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
    },
}

/// Synthesis parameters, mirroring [`SynthSpec`] defaults.
#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = SynthSpec::default().num_classes)]
    pub num_classes: usize,
    #[arg(long, default_value_t = SynthSpec::default().classes_per_task)]
    pub classes_per_task: usize,
    #[arg(long, default_value_t = SynthSpec::default().channels)]
    pub channels: usize,
    #[arg(long, default_value_t = SynthSpec::default().length)]
    pub length: usize,
    #[arg(long, default_value_t = SynthSpec::default().train_per_class)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = SynthSpec::default().test_per_class)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = SynthSpec::default().base_freq)]
    pub base_freq: f64,
    #[arg(long, default_value_t = SynthSpec::default().freq_step)]
    pub freq_step: f64,
    #[arg(long, default_value_t = SynthSpec::default().amplitude)]
    pub amplitude: f64,
    #[arg(long, default_value_t = SynthSpec::default().phase_jitter)]
    pub phase_jitter: f64,
    #[arg(long, default_value_t = SynthSpec::default().noise_level)]
    pub noise_level: f64,
}

impl GenSynthArgs {
    fn spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            num_classes: self.num_classes,
            classes_per_task: self.classes_per_task,
            channels: self.channels,
            length: self.length,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            base_freq: self.base_freq,
            freq_step: self.freq_step,
            amplitude: self.amplitude,
            phase_jitter: self.phase_jitter,
            noise_level: self.noise_level,
            seed,
        }
    }
}

// ── reports ─────────────────────────────────────────────────────────────

/// One seed's outcome inside a [`RunReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub wall_clock_seconds: f64,
    /// Accuracy matrix, per-task averages/forgetting, and confusions.
    pub metrics: MetricsReport,
}

/// The aggregate artifact `run` writes to `<out>/report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    /// Echo of the experiment that produced this report.
    pub config: ExperimentConfig,
    pub num_tasks: usize,
    pub mean_final_accuracy: f64,
    pub std_final_accuracy: f64,
    /// Absent when the stream has a single task (forgetting undefined).
    pub mean_final_forgetting: Option<f64>,
    pub std_final_forgetting: Option<f64>,
    pub wall_clock_seconds: f64,
    pub per_seed: Vec<SeedResult>,
}

/// What `gen-synth` and `sample` report about the file they wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct FileSummary {
    pub path: PathBuf,
    pub samples: usize,
    pub channels: usize,
    pub length: usize,
    pub bytes: u64,
    pub sha256: String,
}

/// One table row produced by `report`, aggregated across run directories.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub num_seeds: usize,
    pub num_tasks: usize,
    pub mean_final_accuracy: f64,
    pub std_final_accuracy: f64,
    pub mean_final_forgetting: Option<f64>,
    pub std_final_forgetting: Option<f64>,
    /// `(mean, std)` of the average accuracy after each task n = 1..=N.
    pub accuracy_curve: Vec<(f64, f64)>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(digest.len() * 2);
    for byte in digest {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

// ── run ─────────────────────────────────────────────────────────────────

/// Builds the task stream one seed sees: synthetic data (or a loaded file)
/// split over a seed-derived class order, optionally z-scored per channel
/// with statistics from the training splits only.
fn build_stream(
    config: &ExperimentConfig,
    seed: u64,
) -> std::result::Result<TaskStream, DataError> {
    let (dataset, train_ratio, normalize) = match &config.data {
        DataSource::Synthetic { spec } => (make_synthetic(spec)?, spec.train_ratio(), false),
        DataSource::File {
            path,
            train_ratio,
            normalize,
        } => (load_dataset(path)?, *train_ratio, *normalize),
    };
    let order = class_order_from_seed(seed, dataset.num_classes());
    let stream = split_stream(&dataset, config.classes_per_task, &order, train_ratio)?;
    if !normalize {
        return Ok(stream);
    }
    let train_splits: Vec<_> = stream.tasks().iter().map(|t| &t.train).collect();
    let stats = ChannelStats::from_datasets(&train_splits);
    let tasks = stream
        .tasks()
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.train.normalize(&stats);
            t.test.normalize(&stats);
            t
        })
        .collect();
    TaskStream::from_tasks(tasks, stream.total_classes())
}

/// Runs every seed of the experiment, writing per-seed checkpoints,
/// matrices, and metrics under `out_dir/seed<k>/` plus the aggregate
/// `report.json` and flat `metrics.csv`.
pub fn cmd_run(config: &ExperimentConfig, out_dir: &Path, quiet: bool) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    fs::create_dir_all(out_dir).map_err(|e| CliError::stage("write-output", e))?;
    let kind = config.method.kind();

    let mut per_seed = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let seed_started = Instant::now();
        let stream = build_stream(config, seed).map_err(|e| CliError::stage("load-data", e))?;
        let seed_dir = out_dir.join(format!("seed{seed}"));
        let outcome = run_stream(
            &config.method,
            &stream,
            &config.protocol,
            &config.classifier_channels,
            seed,
            Some(&seed_dir),
        )
        .map_err(|e| CliError::stage("train", e))?;

        let matrix_json = serde_json::to_string_pretty(&outcome.matrix)
            .map_err(|e| CliError::stage("write-output", e))?;
        fs::write(seed_dir.join("matrix.json"), matrix_json + "\n")
            .map_err(|e| CliError::stage("write-output", e))?;

        let run_id = format!("{kind}-seed{seed}");
        let metrics =
            MetricsReport::from_run(&run_id, kind, seed, outcome.matrix, outcome.confusions)
                .map_err(|e| CliError::stage("evaluate", e))?;
        let metrics_json = metrics
            .to_json()
            .map_err(|e| CliError::stage("write-output", e))?;
        fs::write(seed_dir.join("metrics.json"), metrics_json + "\n")
            .map_err(|e| CliError::stage("write-output", e))?;

        let wall = seed_started.elapsed().as_secs_f64();
        if !quiet {
            let a = metrics.average_accuracy.last().copied().unwrap_or(f64::NAN);
            match metrics.forgetting.last() {
                Some(f) => println!("[{kind} seed {seed}] A_N={a:.3} F_N={f:.3} ({wall:.1}s)"),
                None => println!("[{kind} seed {seed}] A_N={a:.3} ({wall:.1}s)"),
            }
        }
        per_seed.push(SeedResult {
            seed,
            wall_clock_seconds: wall,
            metrics,
        });
    }

    let num_tasks = per_seed[0].metrics.matrix.n_tasks();
    let finals: Vec<f64> = per_seed
        .iter()
        .map(|r| *r.metrics.average_accuracy.last().unwrap())
        .collect();
    let (mean_a, std_a) = mean_std(&finals);
    let forgets: Vec<f64> = per_seed
        .iter()
        .filter_map(|r| r.metrics.forgetting.last().copied())
        .collect();
    let (mean_f, std_f) = if forgets.len() == per_seed.len() {
        let (m, s) = mean_std(&forgets);
        (Some(m), Some(s))
    } else {
        (None, None)
    };

    let seed_tags: Vec<String> = config.seeds.iter().map(|s| format!("s{s}")).collect();
    let report = RunReport {
        run_id: format!("{kind}-{}", seed_tags.join("")),
        config: config.clone(),
        num_tasks,
        mean_final_accuracy: mean_a,
        std_final_accuracy: std_a,
        mean_final_forgetting: mean_f,
        std_final_forgetting: std_f,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        per_seed,
    };

    let report_json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::stage("write-output", e))?;
    fs::write(out_dir.join("report.json"), report_json + "\n")
        .map_err(|e| CliError::stage("write-output", e))?;

    let mut csv = CSV_HEADER.to_string();
    for r in &report.per_seed {
        csv.push_str(&r.metrics.csv_rows());
    }
    fs::write(out_dir.join("metrics.csv"), csv).map_err(|e| CliError::stage("write-output", e))?;

    if !quiet {
        match (mean_f, std_f) {
            (Some(mf), Some(sf)) => println!(
                "{kind}: A_N = {mean_a:.3} ± {std_a:.3}, F_N = {mf:.3} ± {sf:.3} over {} seed(s)",
                report.per_seed.len()
            ),
            _ => println!(
                "{kind}: A_N = {mean_a:.3} ± {std_a:.3} over {} seed(s)",
                report.per_seed.len()
            ),
        }
    }
    Ok(report)
}

// ── gen-synth ───────────────────────────────────────────────────────────

/// Generates a synthetic dataset and writes it as a labeled binary dump.
pub fn cmd_gen_synth(
    args: &GenSynthArgs,
    seed: Option<u64>,
    out_path: &Path,
    quiet: bool,
) -> Result<FileSummary> {
    let spec = args.spec(seed.unwrap_or(SynthSpec::default().seed));
    spec.validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let dataset = make_synthetic(&spec).map_err(|e| CliError::stage("gen-synth", e))?;
    save_dataset(out_path, &dataset).map_err(|e| CliError::stage("write-output", e))?;
    let bytes = fs::read(out_path).map_err(|e| CliError::stage("write-output", e))?;
    let summary = FileSummary {
        path: out_path.to_path_buf(),
        samples: dataset.len(),
        channels: dataset.channels(),
        length: dataset.length(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    };
    if !quiet {
        println!(
            "wrote {} samples ({} classes, {}x{}) to {}: {} bytes, sha256 {}",
            summary.samples,
            dataset.num_classes(),
            summary.channels,
            summary.length,
            summary.path.display(),
            summary.bytes,
            summary.sha256,
        );
    }
    Ok(summary)
}

// ── sample ──────────────────────────────────────────────────────────────

/// Number of leading channel-0 values of the first sample included in the
/// plain-text preview written next to the binary dump.
pub const PREVIEW_POINTS: usize = 50;

/// Draws `count` samples from a saved generator and writes them as an
/// unlabeled dump plus a short plain-text preview (`<out>.preview.txt`).
pub fn cmd_sample(
    checkpoint: &Path,
    count: usize,
    length: usize,
    seed: u64,
    out_path: &Path,
    quiet: bool,
) -> Result<FileSummary> {
    if count == 0 || length == 0 {
        return Err(ConfigError::Invalid("count and length must be >= 1".into()).into());
    }
    let model =
        DiffusionModel::load(checkpoint).map_err(|e| CliError::stage("load-checkpoint", e))?;
    let channels = model.predictor.config().channels;
    let mut rng = substream(seed, "cli/sample");
    let drawn = diffusion::sample(&model, count, (channels, length), &mut rng)
        .map_err(|e| CliError::stage("sample", e))?;

    let per_sample = channels * length;
    let rows: Vec<Vec<f64>> = drawn
        .data()
        .chunks(per_sample)
        .map(<[f64]>::to_vec)
        .collect();
    save_unlabeled(out_path, &rows, channels, length)
        .map_err(|e| CliError::stage("write-output", e))?;

    let mut preview = String::new();
    for v in rows[0].iter().take(PREVIEW_POINTS.min(length)) {
        let _ = writeln!(preview, "{v:.6}");
    }
    let preview_path = preview_path(out_path);
    fs::write(&preview_path, preview).map_err(|e| CliError::stage("write-output", e))?;

    let bytes = fs::read(out_path).map_err(|e| CliError::stage("write-output", e))?;
    let summary = FileSummary {
        path: out_path.to_path_buf(),
        samples: count,
        channels,
        length,
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    };
    if !quiet {
        println!(
            "sampled {} signal(s) ({}x{}) to {}: {} bytes, sha256 {}; preview at {}",
            count,
            channels,
            length,
            summary.path.display(),
            summary.bytes,
            summary.sha256,
            preview_path.display(),
        );
    }
    Ok(summary)
}

/// `samples.rfds` → `samples.preview.txt` (always alongside the dump).
pub fn preview_path(out_path: &Path) -> PathBuf {
    out_path.with_extension("preview.txt")
}

// ── report ──────────────────────────────────────────────────────────────

/// Aggregates `report.json` files from the given run directories, prints a
/// method × (A_N, F_N) table, and writes one accuracy-curve CSV per method
/// into `out_dir`. Aggregation is independent of directory order.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<MethodSummary>> {
    if run_dirs.is_empty() {
        return Err(ConfigError::Invalid("report needs at least one run directory".into()).into());
    }
    let mut by_method: std::collections::BTreeMap<String, Vec<SeedResult>> = Default::default();
    for dir in run_dirs {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path).map_err(|e| {
            CliError::stage(
                "report",
                format!("missing report file {}: {e}", path.display()),
            )
        })?;
        let report: RunReport = serde_json::from_str(&text).map_err(|e| {
            CliError::stage(
                "report",
                format!("unreadable report {}: {e}", path.display()),
            )
        })?;
        by_method
            .entry(report.config.method.kind().to_string())
            .or_default()
            .extend(report.per_seed);
    }

    fs::create_dir_all(out_dir).map_err(|e| CliError::stage("write-output", e))?;
    let mut summaries = Vec::new();
    for (method, mut results) in by_method {
        // Canonical order so aggregation ignores how directories were listed.
        results.sort_by_key(|r| r.seed);
        let num_tasks = results[0].metrics.matrix.n_tasks();
        if let Some(odd) = results
            .iter()
            .find(|r| r.metrics.matrix.n_tasks() != num_tasks)
        {
            return Err(CliError::stage(
                "report",
                format!(
                    "method {method}: task counts differ across runs ({} vs {num_tasks})",
                    odd.metrics.matrix.n_tasks()
                ),
            ));
        }

        let finals: Vec<f64> = results
            .iter()
            .map(|r| *r.metrics.average_accuracy.last().unwrap())
            .collect();
        let (mean_a, std_a) = mean_std(&finals);
        let forgets: Vec<f64> = results
            .iter()
            .filter_map(|r| r.metrics.forgetting.last().copied())
            .collect();
        let (mean_f, std_f) = if forgets.len() == results.len() {
            let (m, s) = mean_std(&forgets);
            (Some(m), Some(s))
        } else {
            (None, None)
        };

        let accuracy_curve: Vec<(f64, f64)> = (0..num_tasks)
            .map(|i| {
                let column: Vec<f64> = results
                    .iter()
                    .map(|r| r.metrics.average_accuracy[i])
                    .collect();
                mean_std(&column)
            })
            .collect();

        let mut curve_csv = String::from("method,n,mean_avg_accuracy,std_avg_accuracy\n");
        for (i, (mean, std)) in accuracy_curve.iter().enumerate() {
            let _ = writeln!(curve_csv, "{method},{},{mean},{std}", i + 1);
        }
        fs::write(out_dir.join(format!("curve_{method}.csv")), curve_csv)
            .map_err(|e| CliError::stage("write-output", e))?;

        summaries.push(MethodSummary {
            method,
            num_seeds: results.len(),
            num_tasks,
            mean_final_accuracy: mean_a,
            std_final_accuracy: std_a,
            mean_final_forgetting: mean_f,
            std_final_forgetting: std_f,
            accuracy_curve,
        });
    }

    println!("{}", render_table(&summaries));
    Ok(summaries)
}

/// The comparison table as a string (also what `report` prints).
pub fn render_table(summaries: &[MethodSummary]) -> String {
    let mut out = String::from("method  seeds  tasks  final avg accuracy  final forgetting\n");
    for s in summaries {
        let forgetting = match (s.mean_final_forgetting, s.std_final_forgetting) {
            (Some(m), Some(sd)) => format!("{m:.3} ± {sd:.3}"),
            _ => "-".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<6}  {:>5}  {:>5}  {:>14.3} ± {:.3}  {}",
            s.method,
            s.num_seeds,
            s.num_tasks,
            s.mean_final_accuracy,
            s.std_final_accuracy,
            forgetting
        );
    }
    out
}

// ── dispatch ────────────────────────────────────────────────────────────

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let Cli {
        seed,
        out,
        quiet,
        command,
    } = cli;
    match command {
        Command::Run { config } => {
            let mut config = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                config.seeds = vec![seed];
            }
            let out_dir = out.unwrap_or_else(|| PathBuf::from("runs"));
            cmd_run(&config, &out_dir, quiet)?;
        }
        Command::GenSynth(args) => {
            let out_path = out.unwrap_or_else(|| PathBuf::from("synthetic.rfds"));
            cmd_gen_synth(&args, seed, &out_path, quiet)?;
        }
        Command::Sample {
            checkpoint,
            count,
            length,
        } => {
            let out_path = out.unwrap_or_else(|| PathBuf::from("samples.rfds"));
            cmd_sample(
                &checkpoint,
                count,
                length,
                seed.unwrap_or(0),
                &out_path,
                quiet,
            )?;
        }
        Command::Report { run_dirs } => {
            let out_dir = out.unwrap_or_else(|| PathBuf::from("."));
            cmd_report(&run_dirs, &out_dir)?;
        }
    }
    Ok(())
}

/// Binary entry point; returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}
