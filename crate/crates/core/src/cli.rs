//! Command-line front end: `train`, `eval`, `export-time`, `probe`, `inspect`.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data or checkpoint
//! error, 3 numeric failure.

use std::ffi::OsString;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use nalgebra::DMatrix;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use crate::evaluator::probe::{self, ProbeError};
use crate::evaluator::{self, Setting};
use crate::model::{init_for_vocab, ModelParams};
use crate::quad_store::{DataError, Dataset, Quadruple, Year};
use crate::trainer::{self, EpochRecord, FitObserver, Stream, TrainError};

#[derive(Debug, Parser)]
#[command(name = "ptbox", version, args_override_self = true, about = "Temporal KG completion with Gumbel boxes and Bernstein time embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints, a log and the resolved config.
    Train(TrainArgs),
    /// Rank a dataset split with a checkpoint.
    Eval(EvalArgs),
    /// Export per-year time embeddings and a 2-D PCA projection.
    ExportTime(ExportArgs),
    /// Evaluate inference-pattern conditions on a checkpoint.
    Probe(ProbeArgs),
    /// Print a checkpoint header.
    Inspect(InspectArgs),
}

/// Run configuration flags. Precedence: defaults, then `--config`, then the
/// named flags, then `--set` entries in order.
#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// Flat `section.key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any config key, e.g. `--set model.meet=hard`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Dataset directory with train/valid/test files.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub dim: Option<String>,
    /// Bernstein polynomial order.
    #[arg(long)]
    pub order: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    /// gumbel or hard.
    #[arg(long)]
    pub meet: Option<String>,
    /// shared or head.
    #[arg(long)]
    pub score: Option<String>,
    /// entity, relation or both.
    #[arg(long)]
    pub evolution: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub neg_ratio: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub workers: Option<String>,
    #[arg(long)]
    pub eval_every: Option<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("data.dir", &self.data),
            ("model.dim", &self.dim),
            ("time.order", &self.order),
            ("model.beta", &self.beta),
            ("model.meet", &self.meet),
            ("model.score", &self.score),
            ("model.evolution", &self.evolution),
            ("train.lr", &self.lr),
            ("train.epochs", &self.epochs),
            ("train.batch_size", &self.batch_size),
            ("train.neg_ratio", &self.neg_ratio),
            ("train.seed", &self.seed),
            ("train.workers", &self.workers),
            ("train.eval_every", &self.eval_every),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for entry in &self.set {
            let (k, v) = entry.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: 0,
                text: entry.clone(),
            })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for best.ptbx, last.ptbx, log.csv and config.txt.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Link,
    Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SettingArg {
    Raw,
    Filtered,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; defaults to `data.dir` from the checkpoint's config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "filtered")]
    pub setting: SettingArg,
    #[arg(long, value_enum, default_value = "link")]
    pub task: Task,
    /// Write one `query,rank` line per query.
    #[arg(long)]
    pub per_query: Option<PathBuf>,
    /// Write the summary as a one-row CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// First year; defaults to the start of the model's span.
    #[arg(long)]
    pub from: Option<Year>,
    /// Last year, inclusive; defaults to the end of the model's span.
    #[arg(long)]
    pub to: Option<Year>,
    #[arg(long, default_value_t = 1)]
    pub step: u32,
    /// Explicit years; overrides the range. Repeatable.
    #[arg(long = "year")]
    pub years: Vec<Year>,
    /// Embedding CSV (`year,x,p0..`). Printed to stdout when omitted.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// PCA CSV (`year,pc1,pc2`).
    #[arg(long)]
    pub pca: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Required unless `--builtin`.
    #[arg(long, required_unless_present = "builtin")]
    pub checkpoint: Option<PathBuf>,
    /// Lines of `<pattern> <relation ids> <entity ids>`.
    #[arg(long, required_unless_present = "builtin")]
    pub patterns: Option<PathBuf>,
    /// Run the hand-constructed configurations instead.
    #[arg(long, conflicts_with_all = ["checkpoint", "patterns"])]
    pub builtin: bool,
    /// Timestamp to probe at; defaults to the middle of the model's span.
    #[arg(long)]
    pub tau: Option<Year>,
    #[arg(long, default_value_t = probe::DEFAULT_TOLERANCE)]
    pub tol: f64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub checkpoint: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::EmptyTrain | TrainError::Io(_) => CliError::Data(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::NonFiniteParam { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
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
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ExportTime(a) => cmd_export_time(&a),
        Command::Probe(a) => cmd_probe(&a),
        Command::Inspect(a) => cmd_inspect(&a),
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let dir = cfg
        .data_dir
        .as_deref()
        .ok_or_else(|| CliError::Config("no dataset directory: pass --data or set data.dir".into()))?;
    if !dir.is_dir() {
        return Err(CliError::Data(format!("dataset directory {} does not exist", dir.display())));
    }
    let ds = Dataset::load(dir, cfg.data)?;
    info!(
        "loaded {}: {} entities, {} relations, {}/{}/{} quadruples",
        dir.display(),
        ds.vocab.num_entities(),
        ds.vocab.num_relations(),
        ds.train.len(),
        ds.valid.len(),
        ds.test.len()
    );
    Ok(ds)
}

/// Streams the log and keeps `best.ptbx` current while training runs.
struct RunWriter<'a> {
    dir: &'a Path,
    log: BufWriter<File>,
    ds: &'a Dataset,
    config_text: &'a str,
}

impl FitObserver for RunWriter<'_> {
    fn on_epoch(&mut self, record: &EpochRecord, model: &ModelParams, improved: bool) -> std::io::Result<()> {
        writeln!(self.log, "{}", record.csv_row())?;
        self.log.flush()?;
        if improved {
            checkpoint::save(&self.dir.join("best.ptbx"), model, &self.ds.vocab, self.config_text.to_string())
                .map_err(std::io::Error::other)?;
        }
        Ok(())
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let ds = load_dataset(&cfg)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let config_text = cfg.to_text();
    write_file(&a.out.join("config.txt"), &config_text)?;

    let mut rng = trainer::stream_rng(cfg.train.seed, Stream::Init);
    let model = init_for_vocab(&ds.vocab, &cfg.model, &mut rng);
    info!("{} trainable scalars", model.trainable_scalar_count());
    let mut log = create(&a.out.join("log.csv"))?;
    writeln!(log, "{}", EpochRecord::CSV_HEADER).map_err(io_err(&a.out))?;
    let mut writer = RunWriter {
        dir: &a.out,
        log,
        ds: &ds,
        config_text: &config_text,
    };
    let result = trainer::fit(&ds, model, &cfg.train, &mut writer)?;
    // Without any validation pass the best model is the last one.
    if result.best_epoch.is_none() {
        checkpoint::save(&a.out.join("best.ptbx"), &result.best, &ds.vocab, config_text.clone())?;
    }
    checkpoint::save(&a.out.join("last.ptbx"), &result.last, &ds.vocab, config_text)?;
    match (result.best_epoch, result.final_val_mrr()) {
        (Some(epoch), Some(mrr)) => println!("best epoch {epoch}; final validation MRR {mrr:.6}"),
        _ => println!("trained {} epochs", cfg.train.epochs),
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    if workers == 0 {
        return Err(CliError::Config("--workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))
}

/// Loads a checkpoint and the dataset it was trained on, rejecting vocabulary mismatches.
fn checkpoint_and_data(path: &Path, data: Option<&Path>) -> Result<(ModelParams, Dataset), CliError> {
    let (model, sidecar) = checkpoint::load(path)?;
    let mut cfg = RunConfig::parse(&sidecar.config)
        .map_err(|e| CliError::Data(format!("{}: {e}", checkpoint::sidecar_path(path).display())))?;
    if let Some(dir) = data {
        cfg.data_dir = Some(dir.to_path_buf());
    }
    let ds = load_dataset(&cfg)?;
    if !sidecar.matches_vocab(&ds.vocab)
        || model.num_entities != ds.vocab.num_entities()
        || model.num_relations != ds.vocab.num_relations()
    {
        return Err(CliError::Data(format!(
            "{} was trained on a different vocabulary",
            path.display()
        )));
    }
    Ok((model, ds))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let (model, ds) = checkpoint_and_data(&a.checkpoint, a.data.as_deref())?;
    let quads: &[Quadruple] = match a.split {
        SplitArg::Train => &ds.train,
        SplitArg::Valid => &ds.valid,
        SplitArg::Test => &ds.test,
    };
    let setting = match a.setting {
        SettingArg::Raw => Setting::Raw,
        SettingArg::Filtered => Setting::Filtered,
    };
    let keep = a.per_query.is_some();
    let (task, report, labels) = pool(a.workers)?.install(|| match a.task {
        Task::Link => (
            "link",
            evaluator::link_prediction(quads, &model, &ds.seen, setting, keep),
            evaluator::link_query_labels(quads),
        ),
        Task::Relation => (
            "relation",
            evaluator::relation_prediction(quads, &model, keep),
            evaluator::relation_query_labels(quads),
        ),
    });
    let setting_name = match a.task {
        Task::Link => setting.name(),
        Task::Relation => "raw",
    };
    println!("{task} prediction, {setting_name}:");
    print!("{report}");
    if let Some(path) = &a.report {
        let text = format!("{}\n{}\n", evaluator::RankingReport::csv_header(), report.csv_row(task, setting_name));
        write_file(path, text)?;
    }
    if let Some(path) = &a.per_query {
        let mut out = create(path)?;
        report.write_per_query(&mut out, &labels).map_err(io_err(path))?;
        out.flush().map_err(io_err(path))?;
    }
    Ok(())
}

/// Projects rows onto their top two principal components; missing components are zero.
pub fn pca2(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return vec![[0.0; 2]; n];
    }
    let mut m = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = m.row_mean();
    for mut row in m.row_iter_mut() {
        row -= &mean;
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut out = vec![[0.0; 2]; n];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut axis = v_t.row(k).transpose();
        // Fix the sign so the largest-magnitude loading is positive.
        let lead = axis.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if lead < 0.0 {
            axis = -axis;
        }
        let proj = &m * axis;
        for (i, o) in out.iter_mut().enumerate() {
            o[slot] = proj[i];
        }
    }
    out
}

pub fn cmd_export_time(a: &ExportArgs) -> Result<(), CliError> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let codec = &model.time;
    let span = codec.span;
    let years: Vec<Year> = if a.years.is_empty() {
        if a.step == 0 {
            return Err(CliError::Config("--step must be at least 1".into()));
        }
        let from = a.from.unwrap_or(span.min);
        let to = a.to.unwrap_or(span.max);
        if from > to {
            return Err(CliError::Config(format!("--from {from} is after --to {to}")));
        }
        (from..=to).step_by(a.step as usize).collect()
    } else {
        a.years.clone()
    };
    let outside = years.iter().filter(|&&y| !span.contains(y)).count();
    if outside > 0 {
        warn!(
            "{outside} requested year(s) outside the span {}..={}; clamped",
            span.min, span.max
        );
    }
    let embeddings: Vec<Vec<f64>> = years.iter().map(|&y| codec.time_embedding(y)).collect();

    let mut csv = String::from("year,x");
    for k in 0..codec.dim {
        csv.push_str(&format!(",p{k}"));
    }
    csv.push('\n');
    for (y, e) in years.iter().zip(&embeddings) {
        csv.push_str(&format!("{y},{}", codec.unit_time(*y)));
        for v in e {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    match &a.csv {
        Some(path) => write_file(path, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(path) = &a.pca {
        let mut text = String::from("year,pc1,pc2\n");
        for (y, [p1, p2]) in years.iter().zip(pca2(&embeddings)) {
            text.push_str(&format!("{y},{p1},{p2}\n"));
        }
        write_file(path, text)?;
    }
    Ok(())
}

pub fn cmd_probe(a: &ProbeArgs) -> Result<(), CliError> {
    if a.builtin {
        let results = probe::run_builtin_suite(a.tol);
        let mut failures = 0;
        let mut csv = String::from("case,pattern,expected,satisfied,statistic,value\n");
        for (case, outcome) in &results {
            let ok = outcome.satisfied == case.expect_satisfied;
            failures += usize::from(!ok);
            println!(
                "{} {:<40} expected {:<5} got {:<5} {} = {:.3e}",
                if ok { "ok  " } else { "FAIL" },
                case.name,
                case.expect_satisfied,
                outcome.satisfied,
                case.instance.pattern.gap_name(),
                outcome.gap()
            );
            for (name, value) in &outcome.values {
                csv.push_str(&format!(
                    "{},{},{},{},{name},{value}\n",
                    case.name, case.instance.pattern, case.expect_satisfied, outcome.satisfied
                ));
            }
        }
        if let Some(path) = &a.csv {
            write_file(path, csv)?;
        }
        println!("{} of {} built-in cases as expected", results.len() - failures, results.len());
        return if failures == 0 {
            Ok(())
        } else {
            Err(CliError::Numeric(format!("{failures} built-in probe case(s) failed")))
        };
    }
    let (Some(ckpt), Some(patterns)) = (&a.checkpoint, &a.patterns) else {
        return Err(CliError::Config("--checkpoint and --patterns are required without --builtin".into()));
    };
    let text = fs::read_to_string(patterns).map_err(|e| CliError::Config(format!("{}: {e}", patterns.display())))?;
    let probes = probe::parse_probe_file(&text)?;
    let (model, _) = checkpoint::load(ckpt)?;
    let span = model.time.span;
    let tau = a.tau.unwrap_or(span.min + (span.max - span.min) / 2);
    if !span.contains(tau) {
        warn!("tau {tau} outside the span {}..={}; clamped", span.min, span.max);
    }
    let report = probe::probe_patterns(&model, &probes, tau, a.tol)?;
    print!("{report}");
    if let Some(path) = &a.csv {
        write_file(path, report.to_csv())?;
    }
    Ok(())
}

pub fn cmd_inspect(a: &InspectArgs) -> Result<(), CliError> {
    let h = checkpoint::read_checkpoint_header(&a.checkpoint)?;
    println!("checkpoint      {}", a.checkpoint.display());
    println!("version         {}", h.version);
    println!("entities        {}", h.num_entities);
    println!("relations       {}", h.num_relations);
    println!("dim             {}", h.dim);
    println!("basis rows      {}", h.rows);
    println!("beta            {}", h.beta);
    println!("meet            {:?}", h.meet);
    println!("score           {:?}", h.score);
    println!("evolution       {:?}", h.evolution);
    println!("normalize time  {}", h.normalize_time);
    println!("warp            {:?}", h.warp);
    let meta = checkpoint::sidecar_path(&a.checkpoint);
    if let Ok(text) = fs::read_to_string(&meta) {
        let sidecar = checkpoint::Sidecar::parse(&text, &meta)?;
        println!("entities sha256 {}", sidecar.entities_sha256);
        println!("relations sha256 {}", sidecar.relations_sha256);
    }
    Ok(())
}
