//! Command driver behind the `gyro` binary: dataset generation, training,
//! evaluation, the outlier study and the self-check suite.
//!
//! Every command reads one flat JSON [`RunConfig`], echoes it into the
//! output directory and is reproducible from that file and the seed.

pub mod verify;

use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{
    generate_synthetic, load_features, save_features, ClassSplit, Dataset, EpisodeError, EpisodeSpec,
    SyntheticDatasetCfg,
};
use crate::geometry::BallConfig;
use crate::netmods::{read_checkpoint, write_checkpoint, Arch, Model, NetError, Variant};
use crate::seeding::Stream;
use crate::train::{
    evaluate, metrics_csv, robustness_csv, run_robustness, train, MetricsRow, OptimizerKind, TrainConfig, TrainError,
    TrainState,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Verify(String),
}

impl CliError {
    /// Stable machine-readable class name.
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Data(_) => "data",
            CliError::Numeric(_) => "numeric",
            CliError::Verify(_) => "verify",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// JSON line written to stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({"error": self.class(), "message": self.to_string()}).to_string()
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> Self {
        match e {
            EpisodeError::Io(_) => CliError::Io(e.to_string()),
            EpisodeError::Format { .. } => CliError::Data(e.to_string()),
            EpisodeError::Geometry(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::Io(_) => CliError::Io(e.to_string()),
            NetError::Checkpoint(_) => CliError::Data(e.to_string()),
            NetError::Arch(_) | NetError::Shape(_) => CliError::Config(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Episode(e) => e.into(),
            TrainError::Net(e) => e.into(),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// A trained model referenced by the outlier study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRef {
    pub name: String,
    pub checkpoint: PathBuf,
}

/// Flat run configuration. Missing keys take their defaults, unknown keys
/// are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Dataset file; a synthetic dataset is generated in memory when absent
    /// (`gen` writes to `out/dataset.bin` instead).
    pub dataset: Option<PathBuf>,
    /// Model for `eval`; defaults to `out/checkpoint.bin`.
    pub checkpoint: Option<PathBuf>,

    /// Curvature magnitude; 0.7 for multi-shot and 0.5 for 1-shot when unset.
    pub c: Option<f64>,
    pub eps: f64,

    pub n_classes: usize,
    pub samples_per_class: usize,
    pub patch_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub class_spread: f64,
    pub within_spread: f64,

    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub n_outliers: usize,

    pub optimizer: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    pub temperature: f64,
    pub val_tasks: usize,
    pub variant: String,
    pub channels: usize,
    /// Continue from `out/last.bin` when it exists.
    pub resume: bool,
    /// Stop after this many completed epochs, leaving `last.bin` to resume.
    pub stop_after: Option<usize>,

    pub eval_epochs: usize,
    pub eval_tasks: usize,

    pub outlier_grid: Vec<usize>,
    /// Models for `robustness`; when absent the three compared variants are
    /// trained first.
    pub models: Option<Vec<ModelRef>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticDatasetCfg::default();
        let tr = TrainConfig::default();
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            dataset: None,
            checkpoint: None,
            c: None,
            eps: BallConfig::DEFAULT_EPS,
            n_classes: syn.n_classes,
            samples_per_class: syn.samples_per_class,
            patch_dim: syn.patch_dim,
            grid_h: syn.grid_h,
            grid_w: syn.grid_w,
            class_spread: syn.class_spread,
            within_spread: syn.within_spread,
            n_way: tr.n_way,
            k_shot: tr.k_shot,
            n_query: tr.n_query,
            n_outliers: 0,
            optimizer: "adam".into(),
            lr: tr.lr,
            weight_decay: tr.weight_decay,
            epochs: tr.epochs,
            tasks_per_epoch: tr.tasks_per_epoch,
            temperature: tr.temperature,
            val_tasks: tr.val_tasks,
            variant: Variant::App2s.name().into(),
            channels: 16,
            resume: false,
            stop_after: None,
            eval_epochs: 100,
            eval_tasks: 100,
            outlier_grid: vec![0, 1, 2, 3, 4],
            models: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is serialisable")
    }

    pub fn ball(&self) -> Result<BallConfig> {
        let c = self.c.unwrap_or_else(|| TrainConfig::default_curvature(self.k_shot));
        BallConfig::new(c, self.eps).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn synthetic(&self) -> Result<SyntheticDatasetCfg> {
        let cfg = SyntheticDatasetCfg {
            n_classes: self.n_classes,
            samples_per_class: self.samples_per_class,
            patch_dim: self.patch_dim,
            grid_h: self.grid_h,
            grid_w: self.grid_w,
            class_spread: self.class_spread,
            within_spread: self.within_spread,
            ball: self.ball()?,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.variant).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            CliError::Usage(format!("unknown variant `{}` (expected one of {})", self.variant, names.join(", ")))
        })
    }

    pub fn train_config(&self, variant: Variant) -> Result<TrainConfig> {
        let optimizer: OptimizerKind = self.optimizer.parse().map_err(CliError::Usage)?;
        let cfg = TrainConfig {
            optimizer,
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            tasks_per_epoch: self.tasks_per_epoch,
            temperature: self.temperature,
            ball: self.ball()?,
            ablation: variant.ablation(),
            n_way: self.n_way,
            k_shot: self.k_shot,
            n_query: self.n_query,
            val_tasks: self.val_tasks,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            n_query: self.n_query,
            n_outliers: self.n_outliers,
            seed: self.seed,
        }
    }

    fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("checkpoint.bin"))
    }

    /// Checks the paths a command reads before any work starts.
    pub fn check_paths(&self, cmd: &Command) -> Result<()> {
        let need = |p: &Path, what: &str| {
            if p.is_file() {
                Ok(())
            } else {
                Err(CliError::Io(format!("{what} {} does not exist", p.display())))
            }
        };
        if !matches!(cmd, Command::Gen | Command::Verify) {
            if let Some(d) = &self.dataset {
                need(d, "dataset")?;
            }
        }
        match cmd {
            Command::Eval => need(&self.checkpoint_path(), "checkpoint")?,
            Command::Robustness => {
                for m in self.models.iter().flatten() {
                    need(&m.checkpoint, "checkpoint")?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Dataset file, or the synthetic dataset described by this config.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            Some(p) => Ok(load_features(p, &self.ball()?)?),
            None => Ok(generate_synthetic(&self.synthetic()?)?),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset file.
    Gen,
    /// Train a model episodically.
    Train,
    /// Evaluate a checkpoint on the test classes.
    Eval,
    /// Accuracy against outliers per support class for the compared variants.
    Robustness,
    /// Run the geometry, gradient and metric self-checks.
    Verify,
}

#[derive(Debug, Parser)]
#[command(name = "gyro", version, about = "Adaptive Poincaré point-to-set few-shot experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

impl Cli {
    /// Config file values with the command-line flags applied on top.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

/// Parses arguments and runs the command, returning what was printed.
pub fn run_args<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => return Ok(e.to_string()),
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    let cfg = cli.run_config()?;
    run_command(cli.command, &cfg)
}

pub fn run_command(cmd: Command, cfg: &RunConfig) -> Result<String> {
    cfg.check_paths(&cmd)?;
    match cmd {
        Command::Gen => cmd_gen(cfg),
        Command::Train => cmd_train(cfg),
        Command::Eval => cmd_eval(cfg),
        Command::Robustness => cmd_robustness(cfg),
        Command::Verify => cmd_verify(cfg),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| io_err(&cfg.out, e))?;
    write(&cfg.out.join("config.json"), cfg.to_json() + "\n")
}

pub fn cmd_gen(cfg: &RunConfig) -> Result<String> {
    let syn = cfg.synthetic()?;
    prepare_out(cfg)?;
    let ds = generate_synthetic(&syn)?;
    let path = cfg.dataset.clone().unwrap_or_else(|| cfg.out.join("dataset.bin"));
    save_features(&path, &ds)?;
    Ok(format!("wrote {} samples to {}\n", ds.len(), path.display()))
}

fn arch_for(cfg: &RunConfig, ds: &Dataset) -> Arch {
    Arch::with_dims(ds.grid_h, ds.grid_w, ds.dim, cfg.channels)
}

/// Trains `variant` into `dir`, writing `metrics.csv`, `checkpoint.bin`
/// (best validation model), `last.bin` (resumable state) and `report.txt`.
fn train_into(cfg: &RunConfig, variant: Variant, ds: &Dataset, dir: &Path) -> Result<(TrainState, String)> {
    let tcfg = cfg.train_config(variant)?;
    let split = ClassSplit::new(ds.n_classes);
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let last = dir.join("last.bin");
    let state = if cfg.resume && last.is_file() {
        let ckpt = read_checkpoint(&last)?;
        let state = TrainState::from_checkpoint(&ckpt, &tcfg)?;
        if state.model.ablation != tcfg.ablation || state.model.ball != tcfg.ball {
            return Err(CliError::Config(format!(
                "{} was written by a different variant or curvature",
                last.display()
            )));
        }
        log::info!("resuming {} at epoch {}", variant.name(), state.epoch);
        state
    } else {
        TrainState::new(arch_for(cfg, ds), &tcfg)?
    };
    let stop = cfg.stop_after.unwrap_or(usize::MAX);
    let mut save_last = |s: &TrainState| -> std::result::Result<ControlFlow<()>, TrainError> {
        write_checkpoint(&last, &s.to_checkpoint())?;
        Ok(if s.epoch >= stop { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
    };
    let state = train(ds, &split, &tcfg, state, &mut save_last)?;
    if state.epoch == 0 {
        write_checkpoint(&last, &state.to_checkpoint())?;
    }
    write(&dir.join("metrics.csv"), metrics_csv(&state.history))?;
    write_checkpoint(&dir.join("checkpoint.bin"), &state.best.to_checkpoint())?;
    let report = train_report(variant, &tcfg, &state);
    write(&dir.join("report.txt"), &report)?;
    Ok((state, report))
}

fn train_report(variant: Variant, cfg: &TrainConfig, state: &TrainState) -> String {
    let loss_of = |rows: &[MetricsRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64;
    let per = cfg.tasks_per_epoch;
    let first = &state.history[..per.min(state.history.len())];
    let last = &state.history[state.history.len().saturating_sub(per)..];
    let mut s = format!("variant={}\n", variant.name());
    s.push_str(&format!("curvature={}\n", cfg.ball.c()));
    s.push_str(&format!("epochs_completed={}\n", state.epoch));
    s.push_str(&format!("first_epoch_loss={}\n", loss_of(first)));
    s.push_str(&format!("last_epoch_loss={}\n", loss_of(last)));
    if state.best_val.is_finite() {
        s.push_str(&format!("best_val_accuracy={}\n", state.best_val));
    }
    s
}

pub fn cmd_train(cfg: &RunConfig) -> Result<String> {
    let variant = cfg.variant()?;
    cfg.train_config(variant)?;
    let ds = cfg.dataset()?;
    prepare_out(cfg)?;
    let (_, report) = train_into(cfg, variant, &ds, &cfg.out)?;
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<String> {
    let ds = cfg.dataset()?;
    let model = Model::load(&cfg.checkpoint_path())?;
    if model.arch.in_dim != ds.dim || model.arch.hw() != ds.hw() {
        return Err(CliError::Config(format!(
            "checkpoint expects {}x{} patches of width {}, dataset has {}x{} of width {}",
            model.arch.grid_h, model.arch.grid_w, model.arch.in_dim, ds.grid_h, ds.grid_w, ds.dim
        )));
    }
    prepare_out(cfg)?;
    let split = ClassSplit::new(ds.n_classes);
    let spec = cfg.episode_spec().for_stream(Stream::EvalEpisode);
    let report = evaluate(&ds, &split.test, &model, &spec, cfg.eval_epochs, cfg.eval_tasks, cfg.temperature)?;
    let rows: Vec<MetricsRow> = report
        .per_task
        .iter()
        .zip(&report.per_task_loss)
        .enumerate()
        .map(|(i, (&accuracy, &loss))| MetricsRow {
            epoch: i / cfg.eval_tasks,
            task: i % cfg.eval_tasks,
            accuracy,
            loss,
        })
        .collect();
    write(&cfg.out.join("metrics.csv"), metrics_csv(&rows))?;
    let text = format!(
        "tasks={}\nmean_accuracy={}\nhalf_width={}\nmean_loss={}\n",
        report.per_task.len(),
        report.mean_accuracy,
        report.half_width,
        report.mean_loss
    );
    write(&cfg.out.join("report.txt"), &text)?;
    Ok(text)
}

/// Variants compared in the outlier study.
pub const ROBUSTNESS_VARIANTS: [Variant; 3] = [Variant::App2s, Variant::Prototype, Variant::EuclideanAp2s];

pub fn cmd_robustness(cfg: &RunConfig) -> Result<String> {
    if cfg.outlier_grid.is_empty() {
        return Err(CliError::Config("outlier_grid is empty".into()));
    }
    let ds = cfg.dataset()?;
    prepare_out(cfg)?;
    let mut named: Vec<(String, Model)> = Vec::new();
    match &cfg.models {
        Some(list) if list.is_empty() => {
            return Err(CliError::Config("models is empty; list checkpoints or omit the key".into()))
        }
        Some(list) => {
            for m in list {
                named.push((m.name.clone(), Model::load(&m.checkpoint)?));
            }
        }
        None => {
            for v in ROBUSTNESS_VARIANTS {
                let (state, _) = train_into(cfg, v, &ds, &cfg.out.join(v.name()))?;
                named.push((v.name().to_string(), state.best));
            }
        }
    }
    let refs: Vec<(String, &Model)> = named.iter().map(|(n, m)| (n.clone(), m)).collect();
    let split = ClassSplit::new(ds.n_classes);
    let spec = cfg.episode_spec().for_stream(Stream::EvalEpisode);
    let rows = run_robustness(&ds, &split.test, &refs, &spec, &cfg.outlier_grid, cfg.eval_tasks, cfg.temperature)?;
    let csv = robustness_csv(&rows);
    write(&cfg.out.join("robustness.csv"), &csv)?;
    let mut report = String::new();
    for (name, _) in &named {
        let mine: Vec<_> = rows.iter().filter(|r| &r.variant == name).collect();
        if let (Some(first), Some(last)) = (mine.first(), mine.last()) {
            report.push_str(&format!(
                "{name}: {:.4} with {} outliers, {:.4} with {} (drop {:.4})\n",
                first.accuracy,
                first.n_outliers,
                last.accuracy,
                last.n_outliers,
                first.accuracy - last.accuracy
            ));
        }
    }
    write(&cfg.out.join("report.txt"), &report)?;
    Ok(csv)
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<String> {
    verify_with(cfg, verify::reference_mobius)
}

/// `verify` with a substitute Möbius addition, for mutation testing.
pub fn verify_with(cfg: &RunConfig, mobius: verify::MobiusFn) -> Result<String> {
    prepare_out(cfg)?;
    let checks = verify::run_suite(&verify::VerifyOptions {
        seed: cfg.seed,
        mobius,
        ..verify::VerifyOptions::default()
    });
    let report = verify::format_report(&checks);
    write(&cfg.out.join("report.txt"), &report)?;
    if checks.iter().all(verify::Check::passed) {
        Ok(report)
    } else {
        print!("{report}");
        Err(CliError::Verify(format!(
            "{} of {} checks failed",
            checks.iter().filter(|c| !c.passed()).count(),
            checks.len()
        )))
    }
}
