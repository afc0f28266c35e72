//! The `acrslf` command line: dataset statistics, single training runs,
//! manifest replay and multi-optimizer comparisons.
//!
//! Every training run writes into its output directory:
//!
//! * `manifest.json`: everything needed to rerun it with `acrslf replay`.
//! * `epochs.csv`: one row per epoch.
//! * `summary.csv`: one row for the run.
//! * `user_ids.csv`, `item_ids.csv`: internal index to external id.
//! * `timings.csv`: real per-epoch wall time, only under `--deterministic`,
//!   where the time columns of the other files are written as zero.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 numerical
//! abort.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cg::CgConfig;
use crate::dataset::{self, format_percent, DatasetError, Delimiter, HdiMatrix, IdMode, IdTable, Ratings};
use crate::model::{self, ModelError};
use crate::optimize::{self, EpochRecord, OptimizerConfig, OptimizerKind, TrainConfig, TrainError, TrainOutcome};
use crate::synthetic::{self, LowRankSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub const EPOCHS_HEADER: &str = "epoch,rmse,objective,wall_seconds,cg_iters,grad_norm,damping";
pub const SUMMARY_HEADER: &str = "optimizer,best_rmse,total_seconds,epochs_run,best_epoch,seconds_to_best,status";
pub const COMPARISON_HEADER: &str = "dataset,model,rmse,time_sec,epoch";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: DatasetError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: invalid manifest: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("training aborted: {0}")]
    Numerical(TrainError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data { .. } | CliError::Io { .. } | CliError::Manifest { .. } | CliError::Model(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> Self {
        match err {
            TrainError::InvalidConfig(msg) => CliError::Usage(msg),
            TrainError::Model(e) if !matches!(e, ModelError::NonFiniteFactor) => CliError::Model(e),
            other => CliError::Numerical(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "acrslf", version, about = "Latent factor models with adaptive cubic damping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print `name,users,items,known,density_percent` for each dataset.
    Stats(StatsArgs),
    /// Train one optimizer and write its run directory.
    Train(TrainArgs),
    /// Rerun a training run from its manifest.
    Replay(ReplayArgs),
    /// Train several optimizers on one split and print a comparison table.
    Compare(CompareArgs),
    /// Write a seeded synthetic low-rank rating file.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long, default_value_t = Delimiter::Auto)]
    pub delimiter: Delimiter,
    #[arg(long, default_value_t = IdMode::Remap)]
    pub ids: IdMode,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = Delimiter::Auto)]
    pub delimiter: Delimiter,
    /// `remap` (first appearance), `zero-based` or `one-based`.
    #[arg(long, default_value_t = IdMode::Remap)]
    pub ids: IdMode,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Seeds the split, the initial factors and the SGD/Adam entry order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long = "f", default_value_t = 20)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.02)]
    pub lambda: f64,
    /// SGD-M and Adam only.
    #[arg(long)]
    pub lr: Option<f64>,
    /// SGD-M only.
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Adam only.
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam only.
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam only.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Fixed damping, slf_fixed only.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Cubic coefficient M, acrslf only.
    #[arg(long = "cubic-m")]
    pub cubic_m: Option<f64>,
    #[arg(long = "cg-max", default_value_t = 30)]
    pub cg_max: usize,
    #[arg(long = "cg-tol", default_value_t = 0.01)]
    pub cg_tol: f64,
    #[arg(long = "cg-warm-start")]
    pub cg_warm_start: bool,
    #[arg(long = "max-epochs", default_value_t = 500)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long = "min-improvement", default_value_t = 1e-5)]
    pub min_improvement: f64,
    #[arg(long = "init-hi", default_value_t = 0.004)]
    pub init_hi: f64,
    /// Write zero for all wall-clock columns so reruns are byte-identical;
    /// real timings go to `timings.csv`.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = OptimizerKind::Acrslf)]
    pub optimizer: OptimizerKind,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write into this directory instead of the one recorded in the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Existing manifests to run; all must share dataset, split and seed.
    #[arg(long = "manifest", conflicts_with_all = ["dataset", "optimizers"])]
    pub manifests: Vec<PathBuf>,
    #[arg(long, required_unless_present = "manifests")]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = Delimiter::Auto)]
    pub delimiter: Delimiter,
    #[arg(long, default_value_t = IdMode::Remap)]
    pub ids: IdMode,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated; defaults to all four.
    #[arg(long, value_delimiter = ',')]
    pub optimizers: Vec<OptimizerKind>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// One subdirectory per optimizer plus `comparison.csv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub users: usize,
    #[arg(long)]
    pub items: usize,
    #[arg(long)]
    pub entries: usize,
    #[arg(long, default_value_t = 5)]
    pub rank: usize,
    /// Round to 1-5 stars with noise instead of exact low-rank values.
    #[arg(long)]
    pub stars: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "\t")]
    pub separator: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub path: PathBuf,
    pub delimiter: Delimiter,
    pub ids: IdMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset: DatasetSource,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub deterministic: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| CliError::Manifest {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.split.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Usage(format!("--split must lie strictly between 0 and 1, got {f}")));
        }
        self.train.validate().map_err(CliError::from)
    }

    fn same_data(&self, other: &RunManifest) -> bool {
        self.dataset == other.dataset && self.split == other.split && self.train.seed == other.train.seed
    }
}

/// One finished run as reported in summaries and comparison tables.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub dataset_name: String,
    pub optimizer: OptimizerKind,
    pub outcome: TrainOutcome,
}

impl RunReport {
    pub fn comparison_row(&self) -> String {
        format!(
            "{},{},{:.5},{:.3},{}",
            self.dataset_name,
            self.optimizer,
            self.outcome.best_rmse,
            self.outcome.total_seconds(),
            self.outcome.epochs_run()
        )
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors go to `stderr`.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let rendered = err.render().to_string();
            if err.use_stderr() {
                let _ = write!(stderr, "{rendered}");
            } else {
                let _ = write!(stdout, "{rendered}");
            }
            return code;
        }
    };
    match run(cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            let _ = writeln!(stderr, "error: {err}");
            err.exit_code()
        }
    }
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Stats(args) => cmd_stats(&args, stdout),
        Command::Train(args) => {
            let manifest = train_manifest(&args)?;
            let report = cmd_train(&manifest)?;
            finish(&report)
        }
        Command::Replay(args) => {
            let mut manifest = RunManifest::load(&args.manifest)?;
            if let Some(out) = args.out {
                manifest.out_dir = out;
            }
            let report = cmd_train(&manifest)?;
            finish(&report)
        }
        Command::Compare(args) => {
            let manifests = compare_manifests(&args)?;
            let reports = cmd_compare(&manifests, &args.out, stdout)?;
            reports.iter().try_for_each(finish)
        }
        Command::Synth(args) => cmd_synth(&args),
    }
}

fn finish(report: &RunReport) -> Result<()> {
    match &report.outcome.failure {
        Some(err) => Err(CliError::Numerical(err.clone())),
        None => Ok(()),
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load(source: &DatasetSource) -> Result<Ratings> {
    dataset::load_ratings_file(&source.path, source.delimiter, source.ids).map_err(|e| match e {
        DatasetError::Io(source_err) => CliError::io(&source.path, source_err),
        other => CliError::Data {
            path: source.path.clone(),
            source: other,
        },
    })
}

pub fn cmd_stats(args: &StatsArgs, stdout: &mut dyn Write) -> Result<()> {
    for path in &args.datasets {
        let source = DatasetSource {
            path: path.clone(),
            delimiter: args.delimiter,
            ids: args.ids,
        };
        let ratings = load(&source)?;
        let line = stats_line(&dataset_name(path), &ratings);
        writeln!(stdout, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    }
    Ok(())
}

/// `name,users,items,known,density_percent`; an empty file has density 0.
pub fn stats_line(name: &str, ratings: &Ratings) -> String {
    let cells = ratings.num_users as f64 * ratings.num_items as f64;
    let density = if cells > 0.0 { ratings.triples.len() as f64 / cells } else { 0.0 };
    format!(
        "{name},{},{},{},{}",
        ratings.num_users,
        ratings.num_items,
        ratings.triples.len(),
        format_percent(density)
    )
}

/// Resolves optimizer hyperparameters, rejecting flags that `kinds` would
/// all ignore.
fn optimizer_configs(kinds: &[OptimizerKind], m: &ModelArgs) -> Result<Vec<OptimizerConfig>> {
    let uses = |flag: &str| -> bool {
        kinds.iter().any(|k| match flag {
            "lr" => matches!(k, OptimizerKind::SgdMomentum | OptimizerKind::Adam),
            "momentum" => *k == OptimizerKind::SgdMomentum,
            "beta1" | "beta2" | "eps" => *k == OptimizerKind::Adam,
            "gamma" => *k == OptimizerKind::SlfFixed,
            "cubic-m" => *k == OptimizerKind::Acrslf,
            _ => unreachable!(),
        })
    };
    let given = [
        ("lr", m.lr.is_some()),
        ("momentum", m.momentum.is_some()),
        ("beta1", m.beta1.is_some()),
        ("beta2", m.beta2.is_some()),
        ("eps", m.eps.is_some()),
        ("gamma", m.gamma.is_some()),
        ("cubic-m", m.cubic_m.is_some()),
    ];
    for (flag, present) in given {
        if present && !uses(flag) {
            let names: Vec<_> = kinds.iter().map(|k| k.name()).collect();
            return Err(CliError::Usage(format!(
                "--{flag} does not apply to {}",
                names.join(", ")
            )));
        }
    }
    Ok(kinds
        .iter()
        .map(|&kind| match OptimizerConfig::default_for(kind) {
            OptimizerConfig::SgdMomentum { learning_rate, momentum } => OptimizerConfig::SgdMomentum {
                learning_rate: m.lr.unwrap_or(learning_rate),
                momentum: m.momentum.unwrap_or(momentum),
            },
            OptimizerConfig::Adam { learning_rate, beta1, beta2, epsilon } => OptimizerConfig::Adam {
                learning_rate: m.lr.unwrap_or(learning_rate),
                beta1: m.beta1.unwrap_or(beta1),
                beta2: m.beta2.unwrap_or(beta2),
                epsilon: m.eps.unwrap_or(epsilon),
            },
            OptimizerConfig::SlfFixed { gamma } => OptimizerConfig::SlfFixed {
                gamma: m.gamma.unwrap_or(gamma),
            },
            OptimizerConfig::Acrslf { cubic_coefficient } => OptimizerConfig::Acrslf {
                cubic_coefficient: m.cubic_m.unwrap_or(cubic_coefficient),
            },
        })
        .collect())
}

fn build_manifest(
    source: DatasetSource,
    split: SplitSpec,
    optimizer: OptimizerConfig,
    m: &ModelArgs,
    out_dir: PathBuf,
) -> Result<RunManifest> {
    let manifest = RunManifest {
        dataset: source,
        split,
        train: TrainConfig {
            optimizer,
            max_epochs: m.max_epochs,
            patience: m.patience,
            rank: m.rank,
            reg_strength: m.lambda,
            cg: CgConfig {
                max_iterations: m.cg_max,
                rel_tolerance: m.cg_tol,
                ..CgConfig::default()
            },
            cg_warm_start: m.cg_warm_start,
            seed: split.seed,
            min_improvement: m.min_improvement,
            init_hi: m.init_hi,
        },
        out_dir,
        deterministic: m.deterministic,
    };
    manifest.validate()?;
    Ok(manifest)
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

pub fn train_manifest(args: &TrainArgs) -> Result<RunManifest> {
    let optimizer = optimizer_configs(&[args.optimizer], &args.model)?[0];
    build_manifest(
        DatasetSource {
            path: absolute(&args.data.dataset),
            delimiter: args.data.delimiter,
            ids: args.data.ids,
        },
        SplitSpec {
            train_fraction: args.data.split,
            seed: args.data.seed,
        },
        optimizer,
        &args.model,
        args.out.clone(),
    )
}

fn compare_manifests(args: &CompareArgs) -> Result<Vec<RunManifest>> {
    if !args.manifests.is_empty() {
        return args.manifests.iter().map(|p| RunManifest::load(p)).collect();
    }
    let dataset = args.dataset.as_ref().expect("clap requires --dataset without --manifest");
    let kinds = if args.optimizers.is_empty() {
        OptimizerKind::ALL.to_vec()
    } else {
        args.optimizers.clone()
    };
    let source = DatasetSource {
        path: absolute(dataset),
        delimiter: args.delimiter,
        ids: args.ids,
    };
    let split = SplitSpec {
        train_fraction: args.split,
        seed: args.seed,
    };
    optimizer_configs(&kinds, &args.model)?
        .into_iter()
        .map(|opt| build_manifest(source.clone(), split, opt, &args.model, args.out.join(opt.kind().name())))
        .collect()
}

/// Loaded and split data shared by runs over one manifest's dataset.
pub struct PreparedData {
    pub ratings: Ratings,
    pub train: HdiMatrix,
    pub eval: Vec<dataset::RatingTriple>,
}

pub fn prepare(manifest: &RunManifest) -> Result<PreparedData> {
    let ratings = load(&manifest.dataset)?;
    let data_err = |source| CliError::Data {
        path: manifest.dataset.path.clone(),
        source,
    };
    let (train_triples, eval) =
        dataset::split(&ratings.triples, manifest.split.train_fraction, manifest.split.seed).map_err(data_err)?;
    if eval.is_empty() {
        return Err(CliError::Usage(format!(
            "split {} of {} ratings leaves no evaluation entries",
            manifest.split.train_fraction,
            ratings.triples.len()
        )));
    }
    let train = HdiMatrix::build(&train_triples, ratings.num_users, ratings.num_items).map_err(data_err)?;
    Ok(PreparedData { ratings, train, eval })
}

pub fn cmd_train(manifest: &RunManifest) -> Result<RunReport> {
    manifest.validate()?;
    let data = prepare(manifest)?;
    run_prepared(manifest, &data)
}

fn run_prepared(manifest: &RunManifest, data: &PreparedData) -> Result<RunReport> {
    let cfg = &manifest.train;
    let initial = model::init_uniform(
        data.train.num_users(),
        data.train.num_items(),
        cfg.rank,
        cfg.init_hi,
        cfg.reg_strength,
        cfg.seed,
    )?;
    let outcome = optimize::train(initial, &data.train, &data.eval, cfg)?;
    let report = RunReport {
        dataset_name: dataset_name(&manifest.dataset.path),
        optimizer: cfg.optimizer.kind(),
        outcome,
    };
    write_run(manifest, data, &report)?;
    Ok(report)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, body: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn epochs_csv(history: &[EpochRecord], deterministic: bool, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "{EPOCHS_HEADER}")?;
    for r in history {
        let seconds = if deterministic { 0.0 } else { r.wall_seconds };
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.rmse_eval, r.objective_train, seconds, r.cg_iterations, r.gradient_norm, r.damping_value
        )?;
    }
    Ok(())
}

pub fn summary_csv(report: &RunReport, deterministic: bool, out: &mut dyn Write) -> io::Result<()> {
    let o = &report.outcome;
    let (total, to_best) = if deterministic {
        (0.0, 0.0)
    } else {
        (o.total_seconds(), o.seconds_to_best())
    };
    let status = if o.failure.is_some() { "aborted" } else { "completed" };
    writeln!(out, "{SUMMARY_HEADER}")?;
    writeln!(
        out,
        "{},{},{},{},{},{},{}",
        report.optimizer,
        o.best_rmse,
        total,
        o.epochs_run(),
        o.best_epoch.unwrap_or(0),
        to_best,
        status
    )
}

fn ids_csv(table: &IdTable, count: usize, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "index,id")?;
    for k in 0..count {
        writeln!(out, "{k},{}", table.external(k))?;
    }
    Ok(())
}

fn write_run(manifest: &RunManifest, data: &PreparedData, report: &RunReport) -> Result<()> {
    let dir = &manifest.out_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    let det = manifest.deterministic;
    let history = &report.outcome.history;
    write_file(&dir.join("epochs.csv"), |w| epochs_csv(history, det, w))?;
    write_file(&dir.join("summary.csv"), |w| summary_csv(report, det, w))?;
    write_file(&dir.join("user_ids.csv"), |w| {
        ids_csv(&data.ratings.user_ids, data.ratings.num_users, w)
    })?;
    write_file(&dir.join("item_ids.csv"), |w| {
        ids_csv(&data.ratings.item_ids, data.ratings.num_items, w)
    })?;
    if det {
        write_file(&dir.join("timings.csv"), |w| {
            writeln!(w, "epoch,wall_seconds")?;
            history.iter().try_for_each(|r| writeln!(w, "{},{}", r.epoch, r.wall_seconds))
        })?;
    }
    if let Some(err) = &report.outcome.failure {
        write_file(&dir.join("failure.txt"), |w| writeln!(w, "{err}"))?;
    }
    Ok(())
}

/// Runs every manifest in order over one shared split, then prints and
/// writes the comparison table.
pub fn cmd_compare(manifests: &[RunManifest], out_dir: &Path, stdout: &mut dyn Write) -> Result<Vec<RunReport>> {
    let first = manifests
        .first()
        .ok_or_else(|| CliError::Usage("compare needs at least one run".into()))?;
    for m in manifests {
        if !m.same_data(first) {
            return Err(CliError::Usage(format!(
                "manifests disagree on dataset, split or seed: {} vs {}",
                first.dataset.path.display(),
                m.dataset.path.display()
            )));
        }
        m.validate()?;
    }
    let data = prepare(first)?;
    let mut reports = Vec::with_capacity(manifests.len());
    for m in manifests {
        reports.push(run_prepared(m, &data)?);
    }
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut table = String::new();
    table.push_str(COMPARISON_HEADER);
    table.push('\n');
    for r in &reports {
        table.push_str(&r.comparison_row());
        table.push('\n');
    }
    let path = out_dir.join("comparison.csv");
    fs::write(&path, &table).map_err(|e| CliError::io(&path, e))?;
    stdout
        .write_all(table.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(reports)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.users == 0 || args.items == 0 || args.rank == 0 {
        return Err(CliError::Usage("--users, --items and --rank must be positive".into()));
    }
    let cells = args.users.saturating_mul(args.items);
    if args.entries > cells || args.entries < args.users.max(args.items) {
        return Err(CliError::Usage(format!(
            "--entries must lie in [{}, {cells}]",
            args.users.max(args.items)
        )));
    }
    let spec = if args.stars {
        LowRankSpec {
            rank: args.rank,
            ..LowRankSpec::star_ratings(args.users, args.items, args.entries, args.seed)
        }
    } else {
        LowRankSpec {
            num_entries: args.entries,
            ..LowRankSpec::noiseless(args.users, args.items, args.rank, 0.0, args.seed)
        }
    };
    let data = synthetic::low_rank(&spec);
    write_file(&args.out, |w| synthetic::write_triples(w, &data.triples, &args.separator, 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_args(extra: &[&str]) -> ModelArgs {
        #[derive(Parser)]
        struct Wrap {
            #[command(flatten)]
            m: ModelArgs,
        }
        let mut argv = vec!["x"];
        argv.extend_from_slice(extra);
        Wrap::parse_from(argv).m
    }

    #[test]
    fn defaults_follow_documented_setup() {
        let m = model_args(&[]);
        assert_eq!((m.rank, m.max_epochs, m.patience, m.init_hi), (20, 500, 10, 0.004));
        assert_eq!((m.cg_max, m.cg_tol, m.lambda), (30, 0.01, 0.02));
    }

    #[test]
    fn rejects_flags_for_other_optimizers() {
        let m = model_args(&["--cubic-m", "2"]);
        let err = optimizer_configs(&[OptimizerKind::SgdMomentum], &m).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_USAGE);
        assert!(err.to_string().contains("--cubic-m"));
        assert!(optimizer_configs(&[OptimizerKind::Acrslf], &m).is_ok());
        let m = model_args(&["--lr", "0.1"]);
        assert!(optimizer_configs(&[OptimizerKind::SlfFixed], &m).is_err());
        assert!(optimizer_configs(&[OptimizerKind::SlfFixed, OptimizerKind::Adam], &m).is_ok());
    }

    #[test]
    fn flags_override_defaults() {
        let m = model_args(&["--lr", "0.1", "--beta2", "0.9"]);
        let cfgs = optimizer_configs(&[OptimizerKind::SgdMomentum, OptimizerKind::Adam], &m).unwrap();
        assert_eq!(
            cfgs[0],
            OptimizerConfig::SgdMomentum {
                learning_rate: 0.1,
                momentum: OptimizerConfig::DEFAULT_MOMENTUM
            }
        );
        assert!(matches!(cfgs[1], OptimizerConfig::Adam { learning_rate, beta2, .. } if learning_rate == 0.1 && beta2 == 0.9));
    }

    #[test]
    fn stats_lines() {
        let parse = |s: &str| dataset::load_ratings(s.as_bytes(), Delimiter::Auto, IdMode::Remap).unwrap();
        assert_eq!(stats_line("empty", &parse("")), "empty,0,0,0,0.00");
        assert_eq!(stats_line("full", &parse("1,1,5\n1,2,3\n2,1,4\n2,2,1\n")), "full,2,2,4,100.00");
        assert_eq!(stats_line("third", &parse("1 1 5\n2 2 3\n3 3 1\n")), "third,3,3,3,33.33");
    }

    #[test]
    fn manifest_round_trip() {
        let m = RunManifest {
            dataset: DatasetSource {
                path: "ratings.dat".into(),
                delimiter: Delimiter::DoubleColon,
                ids: IdMode::Offset { base: 1 },
            },
            split: SplitSpec {
                train_fraction: 0.8,
                seed: 3,
            },
            train: TrainConfig::default(),
            out_dir: "runs/a".into(),
            deterministic: true,
        };
        let text = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<RunManifest>(&text).unwrap(), m);
    }

    #[test]
    fn epochs_csv_shape() {
        let rec = EpochRecord {
            epoch: 1,
            rmse_eval: 0.9,
            objective_train: 12.5,
            wall_seconds: 0.25,
            cg_iterations: 4,
            gradient_norm: 3.0,
            damping_value: 3.0,
            entry_touches: 10,
        };
        let mut buf = Vec::new();
        epochs_csv(std::slice::from_ref(&rec), false, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{EPOCHS_HEADER}\n1,0.9,12.5,0.25,4,3,3\n"));
        let mut buf = Vec::new();
        epochs_csv(&[rec], true, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("1,0.9,12.5,0,4,3,3\n"));
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(CliError::from(TrainError::InvalidConfig("x".into())).exit_code(), EXIT_USAGE);
        let diverged = TrainError::Diverged {
            epoch: 1,
            objective: 1.0,
            initial: 0.0,
        };
        assert_eq!(CliError::from(diverged).exit_code(), EXIT_NUMERICAL);
        assert_eq!(CliError::from(TrainError::Model(ModelError::EmptyEvalSet)).exit_code(), EXIT_DATA);
    }
}
