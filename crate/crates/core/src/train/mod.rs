//! Episodic training, evaluation with confidence intervals and the outlier
//! robustness study.

mod forward;
mod optim;

pub use forward::{argmin_rows, forward_episode, predict, prototype_baseline, EpisodeForward};
pub use optim::{Optimizer, OptimizerKind, SGD_MOMENTUM};

use std::ops::ControlFlow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::episodes::{sample_episode, ClassSplit, Dataset, Episode, EpisodeError, EpisodeSpec};
use crate::geometry::{BallConfig, GeometryError};
use crate::metrics::MetricError;
use crate::netmods::{apply_bn_updates, Ablation, Arch, Checkpoint, ForwardCtx, Model, NetError};
use crate::seeding::{derive_seed, rng_for, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at epoch {epoch}, task {task}: {diagnostic}")]
    NonFinite { epoch: usize, task: usize, diagnostic: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub tasks_per_epoch: usize,
    /// Softmax temperature over negative distances.
    pub temperature: f64,
    pub ball: BallConfig,
    pub ablation: Ablation,
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per class in training and validation episodes.
    pub n_query: usize,
    /// Validation episodes after each epoch; 0 keeps the last epoch.
    pub val_tasks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            weight_decay: 5e-4,
            epochs: 10,
            tasks_per_epoch: 100,
            temperature: 1.0,
            ball: BallConfig::default(),
            ablation: Ablation::full(),
            n_way: 5,
            k_shot: 5,
            n_query: 3,
            val_tasks: 30,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Curvature 0.7 for multi-shot and 0.5 for 1-shot tasks.
    pub fn default_curvature(k_shot: usize) -> f64 {
        if k_shot == 1 {
            0.5
        } else {
            0.7
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.tasks_per_epoch == 0 || self.n_way == 0 || self.k_shot == 0 || self.n_query == 0 {
            return bad("tasks_per_epoch, n_way, k_shot and n_query must be positive".into());
        }
        Ok(())
    }

    pub fn episode_spec(&self, n_outliers: usize) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            n_query: self.n_query,
            n_outliers,
            seed: self.seed,
        }
    }

    /// Learning rate for `epoch`: constant, then a single x0.1 decay for
    /// the last quarter of training.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch * 4 >= self.epochs * 3 {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub task: usize,
    pub accuracy: f64,
    pub loss: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,task,accuracy,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.task, r.accuracy, r.loss));
    }
    out
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// Parameters with the best validation accuracy so far.
    pub best: Model,
    pub best_val: f64,
    pub optimizer: Optimizer,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: Vec<MetricsRow>,
}

impl TrainState {
    pub fn new(arch: Arch, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(arch, cfg.ablation, cfg.ball, derive_seed(cfg.seed, Stream::Init, 0))?;
        let optimizer = Optimizer::new(cfg.optimizer, cfg.weight_decay, &model.params);
        Ok(Self {
            best: model.clone(),
            model,
            best_val: f64::NEG_INFINITY,
            optimizer,
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.meta["epoch"] = serde_json::json!(self.epoch);
        ckpt.meta["optimizer_steps"] = serde_json::json!(self.optimizer.steps);
        for p in self.best.params.iter() {
            ckpt.tensors.push((format!("best/{}", p.name), p.value.clone()));
        }
        for (p, t) in self.model.params.iter().zip(&self.optimizer.first) {
            ckpt.tensors.push((format!("opt.m/{}", p.name), t.clone()));
        }
        for (p, t) in self.model.params.iter().zip(&self.optimizer.second) {
            ckpt.tensors.push((format!("opt.v/{}", p.name), t.clone()));
        }
        ckpt.tensors.push(("best_val".into(), Tensor::scalar(self.best_val)));
        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| [r.epoch as f64, r.task as f64, r.accuracy, r.loss])
            .collect();
        ckpt.tensors.push((
            "history".into(),
            Tensor::new(self.history.len(), 4, hist).expect("four columns"),
        ));
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let missing = |what: &str| TrainError::Net(NetError::Checkpoint(format!("resume state lacks {what}")));
        let model = Model::from_checkpoint(ckpt)?;
        let mut best = model.clone();
        best.load_tensors(&ckpt.tensors, "best/")?;
        let mut optimizer = Optimizer::new(cfg.optimizer, cfg.weight_decay, &model.params);
        optimizer.steps = ckpt.meta["optimizer_steps"].as_u64().ok_or_else(|| missing("optimizer_steps"))?;
        let fetch = |prefix: &str, name: &str| {
            ckpt.get(&format!("{prefix}/{name}"))
                .cloned()
                .ok_or_else(|| missing(&format!("{prefix}/{name}")))
        };
        for (i, p) in model.params.iter().enumerate() {
            optimizer.first[i] = fetch("opt.m", &p.name)?;
            if !optimizer.second.is_empty() {
                optimizer.second[i] = fetch("opt.v", &p.name)?;
            }
        }
        let epoch = ckpt.meta["epoch"].as_u64().ok_or_else(|| missing("epoch"))? as usize;
        let best_val = ckpt.get("best_val").ok_or_else(|| missing("best_val"))?.item();
        let hist = ckpt.get("history").ok_or_else(|| missing("history"))?;
        let history = (0..hist.rows())
            .map(|r| {
                let v = hist.row_slice(r);
                MetricsRow {
                    epoch: v[0] as usize,
                    task: v[1] as usize,
                    accuracy: v[2],
                    loss: v[3],
                }
            })
            .collect();
        Ok(Self {
            model,
            best,
            best_val,
            optimizer,
            epoch,
            history,
        })
    }
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

fn nonfinite_diagnostic(model: &Model, loss: f64, grads: &[Tensor]) -> String {
    let bad: Vec<&str> = model
        .params
        .iter()
        .zip(grads)
        .filter(|(_, g)| !g.is_finite())
        .map(|(p, _)| p.name.as_str())
        .collect();
    let largest = model
        .params
        .iter()
        .map(|p| (p.name.as_str(), p.value.max_abs()))
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let broken: Vec<&str> = model
        .params
        .iter()
        .filter(|p| !p.value.is_finite())
        .map(|p| p.name.as_str())
        .collect();
    format!(
        "loss = {loss}; non-finite gradients in [{}]; non-finite parameters in [{}]; largest parameter {} = {:e}",
        bad.join(", "),
        broken.join(", "),
        largest.0,
        largest.1
    )
}

/// One optimisation step on `ep`.
///
/// Returns the pre-update accuracy and loss, and whether the step was
/// applied (it is skipped when the loss or a gradient is not finite).
pub fn train_step(model: &mut Model, opt: &mut Optimizer, ep: &Episode, cfg: &TrainConfig, lr: f64, step: u64) -> Result<(f64, f64, bool)> {
    train_step_observed(model, opt, ep, cfg, lr, step, &mut |_, _| {})
}

/// [`train_step`] that hands the forward pass to `observe` before the update.
pub fn train_step_observed(
    model: &mut Model,
    opt: &mut Optimizer,
    ep: &Episode,
    cfg: &TrainConfig,
    lr: f64,
    step: u64,
    observe: &mut dyn FnMut(&Tape, &EpisodeForward),
) -> Result<(f64, f64, bool)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut ctx = ForwardCtx::train(rng_for(cfg.seed, Stream::Dropout, step));
    let out = forward_episode(&mut tape, model, &bound, &mut ctx, ep, cfg.temperature)?;
    observe(&tape, &out);
    let loss = tape.scalar(out.loss);
    let acc = accuracy(&argmin_rows(tape.value(out.distances)), &ep.query_labels());
    let grads = bound.collect_grads(&tape.backward(out.loss)?, &model.params);
    let finite = loss.is_finite() && grads.iter().all(Tensor::is_finite);
    if finite {
        opt.step(&mut model.params, &grads, lr);
        apply_bn_updates(&mut model.params, &ctx.take_bn_updates());
    }
    Ok((acc, loss, finite))
}

/// Runs the remaining epochs of `state`.
///
/// Episode `epoch * tasks_per_epoch + task` of the training stream is used
/// for each step, so a run resumed at an epoch boundary continues exactly
/// as an uninterrupted one. `on_epoch` sees the state after every epoch
/// and may stop training early.
pub fn train(
    ds: &Dataset,
    split: &ClassSplit,
    cfg: &TrainConfig,
    state: TrainState,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<ControlFlow<()>>,
) -> Result<TrainState> {
    train_observed(ds, split, cfg, state, on_epoch, &mut |_, _| {})
}

/// [`train`] with access to every training step's forward pass.
pub fn train_observed(
    ds: &Dataset,
    split: &ClassSplit,
    cfg: &TrainConfig,
    mut state: TrainState,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<ControlFlow<()>>,
    on_step: &mut dyn FnMut(&Tape, &EpisodeForward),
) -> Result<TrainState> {
    cfg.validate()?;
    let train_spec = cfg.episode_spec(0).for_stream(Stream::TrainEpisode);
    let val_spec = cfg.episode_spec(0).for_stream(Stream::ValEpisode);
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let lr = cfg.lr_at(epoch);
        for task in 0..cfg.tasks_per_epoch {
            let step = (epoch * cfg.tasks_per_epoch + task) as u64;
            let ep = sample_episode(ds, &split.train, &train_spec, step)?;
            let (acc, loss, finite) = match train_step_observed(&mut state.model, &mut state.optimizer, &ep, cfg, lr, step, on_step) {
                Err(TrainError::Autodiff(AutodiffError::Domain(v))) if !v.is_finite() => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        task,
                        diagnostic: nonfinite_diagnostic(&state.model, f64::NAN, &[]),
                    });
                }
                r => r?,
            };
            if !finite {
                let mut tape = Tape::new();
                let bound = state.model.bind(&mut tape);
                let mut ctx = ForwardCtx::train(rng_for(cfg.seed, Stream::Dropout, step));
                let out = forward_episode(&mut tape, &state.model, &bound, &mut ctx, &ep, cfg.temperature)?;
                let grads = bound.collect_grads(&tape.backward(out.loss)?, &state.model.params);
                return Err(TrainError::NonFinite {
                    epoch,
                    task,
                    diagnostic: nonfinite_diagnostic(&state.model, loss, &grads),
                });
            }
            state.history.push(MetricsRow {
                epoch,
                task,
                accuracy: acc,
                loss,
            });
        }
        let recent = &state.history[state.history.len() - cfg.tasks_per_epoch..];
        let mean_loss = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len() as f64;
        if cfg.val_tasks > 0 {
            let val = evaluate(ds, &split.val, &state.model, &val_spec, 1, cfg.val_tasks, cfg.temperature)?.mean_accuracy;
            log::info!("epoch {epoch}: train loss {mean_loss:.4}, val accuracy {val:.4}, lr {lr:e}");
            if val > state.best_val {
                state.best_val = val;
                state.best = state.model.clone();
            }
        } else {
            log::info!("epoch {epoch}: train loss {mean_loss:.4}, lr {lr:e}");
            state.best = state.model.clone();
        }
        state.epoch += 1;
        if on_epoch(&state)?.is_break() {
            break;
        }
    }
    Ok(state)
}

/// Mean accuracy with a 95% normal-approximation interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    /// `1.96 * std / sqrt(n_tasks)`.
    pub half_width: f64,
    pub per_task: Vec<f64>,
    pub per_task_loss: Vec<f64>,
    pub mean_loss: f64,
}

impl EvalReport {
    pub fn from_tasks(per_task: Vec<f64>, losses: Vec<f64>) -> Self {
        let n = per_task.len() as f64;
        let mean = per_task.iter().sum::<f64>() / n;
        let var = if per_task.len() > 1 {
            per_task.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean_accuracy: mean,
            half_width: 1.96 * var.sqrt() / n.sqrt(),
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            per_task,
            per_task_loss: losses,
        }
    }
}

/// Accuracy over `n_epochs * tasks` episodes drawn from `pool`.
///
/// Episodes are scored in parallel; the report does not depend on the
/// thread count.
pub fn evaluate(
    ds: &Dataset,
    pool: &[u32],
    model: &Model,
    spec: &EpisodeSpec,
    n_epochs: usize,
    tasks: usize,
    temperature: f64,
) -> Result<EvalReport> {
    let total = n_epochs * tasks;
    if total == 0 {
        return Err(TrainError::Config("evaluation needs at least one task".into()));
    }
    let results: Vec<Result<(f64, f64)>> = (0..total as u64)
        .into_par_iter()
        .map(|i| {
            let ep = sample_episode(ds, pool, spec, i)?;
            let (pred, loss) = predict(model, &ep, temperature)?;
            Ok((accuracy(&pred, &ep.query_labels()), loss))
        })
        .collect();
    let mut acc = Vec::with_capacity(total);
    let mut losses = Vec::with_capacity(total);
    for r in results {
        let (a, l) = r?;
        acc.push(a);
        losses.push(l);
    }
    Ok(EvalReport::from_tasks(acc, losses))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub variant: String,
    pub n_outliers: usize,
    pub accuracy: f64,
    pub half_width: f64,
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut out = String::from("variant,n_outliers,accuracy,half_width\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.variant, r.n_outliers, r.accuracy, r.half_width));
    }
    out
}

/// Accuracy of every model as outliers are added to each support class.
///
/// All outlier counts reuse the same episode indices, so the genuine
/// support and query samples are shared across the grid.
pub fn run_robustness(
    ds: &Dataset,
    pool: &[u32],
    models: &[(String, &Model)],
    spec: &EpisodeSpec,
    outlier_grid: &[usize],
    tasks: usize,
    temperature: f64,
) -> Result<Vec<RobustnessRow>> {
    if models.is_empty() {
        return Err(TrainError::Config("robustness study needs at least one model".into()));
    }
    let mut rows = Vec::with_capacity(models.len() * outlier_grid.len());
    for (name, model) in models {
        for &m in outlier_grid {
            let spec = EpisodeSpec { n_outliers: m, ..*spec };
            let report = evaluate(ds, pool, model, &spec, 1, tasks, temperature)?;
            log::info!("{name} with {m} outliers: {:.4}", report.mean_accuracy);
            rows.push(RobustnessRow {
                variant: name.clone(),
                n_outliers: m,
                accuracy: report.mean_accuracy,
                half_width: report.half_width,
            });
        }
    }
    Ok(rows)
}
