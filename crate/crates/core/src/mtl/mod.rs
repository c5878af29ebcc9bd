//! Multi-task losses, uncertainty weighting and the supervised trainer used
//! both for conventional multi-task training and for masked fine-tuning.

mod adam;

pub use adam::{Adam, AdamConfig};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::models::{Bound, MultiTaskModel, ParamKey, ParamRole, TaskId, TaskKind};
use crate::sparsity::{apply_mask, prox_in_place, MaskSet};
use crate::synth::Dataset;

/// Mean-reduced loss of one task: mse for regression, binary cross-entropy
/// on logits for classification.
pub fn task_loss(g: &mut Graph, kind: TaskKind, predictions: Var, labels: Var) -> Result<Var> {
    match kind {
        TaskKind::Regression => g.mse(predictions, labels),
        TaskKind::BinaryClassification => g.cross_entropy(predictions, labels),
    }
}

/// `Σ_i l_i/(2σ_i²) + log σ_i` with `σ_i = exp(s_i)` for the given `log σ` scalars.
pub fn combine_uncertainty(g: &mut Graph, losses: &[Var], log_sigmas: &[Var]) -> Result<Var> {
    if losses.is_empty() || losses.len() != log_sigmas.len() {
        return Err(shape_err(
            "combine_uncertainty",
            format!("{} losses vs {} noise parameters", losses.len(), log_sigmas.len()),
        ));
    }
    let mut total = None;
    for (&l, &s) in losses.iter().zip(log_sigmas) {
        let inv_var = g.scale(s, -2.0)?;
        let inv_var = g.exp(inv_var);
        let weighted = g.mul(l, inv_var)?;
        let weighted = g.scale(weighted, 0.5)?;
        let term = g.add(weighted, s)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Scalar counterpart of [`combine_uncertainty`].
pub fn combine_uncertainty_value(losses: &[f64], log_sigmas: &[f64]) -> f64 {
    losses.iter().zip(log_sigmas).map(|(l, s)| 0.5 * l * (-2.0 * s).exp() + s).sum()
}

/// Per-task losses and the objective of one forward pass over a batch.
pub struct BatchLoss {
    pub objective: Var,
    pub per_task: Vec<(TaskId, Var)>,
}

/// Builds the episode objective for `tasks` on the samples `indices`: the
/// plain task loss for a single task, the uncertainty-weighted sum otherwise.
pub fn batch_loss(g: &mut Graph, model: &MultiTaskModel, bound: &Bound, data: &Dataset, indices: &[usize], tasks: &[TaskId]) -> Result<BatchLoss> {
    if tasks.is_empty() || indices.is_empty() {
        return Err(invalid("a batch needs at least one task and one sample"));
    }
    let [h, w] = model.config().image;
    let x = g.constant(&[indices.len(), model.config().backbone.in_channels(), h, w], data.inputs_of(indices))?;
    let features = model.features(g, bound, x)?;
    let mut per_task = Vec::with_capacity(tasks.len());
    for &t in tasks {
        let pred = model.head(g, bound, features, t)?;
        let y = g.constant(&[indices.len(), 1], data.labels_of(t, indices)?)?;
        per_task.push((t, task_loss(g, model.task_kind(t)?, pred, y)?));
    }
    let objective = if tasks.len() == 1 {
        per_task[0].1
    } else {
        let losses: Vec<Var> = per_task.iter().map(|p| p.1).collect();
        let sigmas: Vec<Var> = tasks.iter().map(|&t| bound[&ParamKey::LogSigma(t)]).collect();
        combine_uncertainty(g, &losses, &sigmas)?
    };
    Ok(BatchLoss { objective, per_task })
}

/// Parameters that receive gradients when training on `tasks`.
pub fn trainable_keys(model: &MultiTaskModel, tasks: &[TaskId], frozen: &BTreeSet<ParamKey>) -> BTreeSet<ParamKey> {
    model
        .params()
        .keys()
        .copied()
        .filter(|k| !frozen.contains(k))
        .filter(|k| match k.role() {
            ParamRole::Backbone => true,
            ParamRole::Head => tasks.contains(&k.task().expect("heads belong to a task")),
            ParamRole::Noise => tasks.len() > 1 && tasks.contains(&k.task().expect("noise belongs to a task")),
        })
        .collect()
}

/// One forward/backward pass; returns the objective value, per-task loss
/// values and the gradients of every trainable parameter.
pub fn gradients(
    model: &MultiTaskModel,
    data: &Dataset,
    indices: &[usize],
    tasks: &[TaskId],
    trainable: &BTreeSet<ParamKey>,
) -> Result<(f64, Vec<(TaskId, f64)>, BTreeMap<ParamKey, Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, |k| trainable.contains(&k));
    let loss = batch_loss(&mut g, model, &bound, data, indices, tasks)?;
    let value = g.item(loss.objective);
    let per_task: Vec<(TaskId, f64)> = loss.per_task.iter().map(|&(t, v)| (t, g.item(v))).collect();
    if !value.is_finite() {
        return Err(Error::Divergence(format!("non-finite training loss {value} on tasks {tasks:?}")));
    }
    let mut grads = g.backward(loss.objective)?;
    let out = trainable
        .iter()
        .map(|&k| {
            let v = bound[&k];
            let gr = grads.take(v).unwrap_or_else(|| vec![0.0; model.params()[&k].numel()]);
            (k, gr)
        })
        .collect();
    Ok((value, per_task, out))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_head: f64,
    /// Learning rate of the `log σ` parameters.
    pub lr_noise: f64,
    /// L2 coefficients added to the backbone and head gradients.
    pub weight_decay_backbone: f64,
    pub weight_decay_head: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    /// Fixed group-lasso strength; 0 trains without the proximal step.
    pub lambda: f64,
    /// Reload the parameters of the best validation epoch when training ends.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-5,
            lr_head: 1e-4,
            lr_noise: 1e-4,
            weight_decay_backbone: 0.1,
            weight_decay_head: 0.01,
            adam: AdamConfig::default(),
            batch_size: 16,
            max_epochs: 100,
            patience: 15,
            lambda: 0.0,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    /// Step sizes that converge within a few hundred epochs on the synthetic
    /// suite. The other fields keep their defaults.
    pub fn desk() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_head: 1e-3,
            lr_noise: 1e-3,
            max_epochs: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_backbone, self.lr_head, self.lr_noise];
        if lrs.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return Err(invalid(format!("learning rates must be positive, got {lrs:?}")));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid("batch size and epoch budget must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.weight_decay_backbone >= 0.0 && self.weight_decay_head >= 0.0) {
            return Err(invalid("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn weight_decay(&self, role: ParamRole) -> f64 {
        match role {
            ParamRole::Backbone => self.weight_decay_backbone,
            ParamRole::Head => self.weight_decay_head,
            ParamRole::Noise => 0.0,
        }
    }

    pub fn lr(&self, role: ParamRole) -> f64 {
        match role {
            ParamRole::Backbone => self.lr_backbone,
            ParamRole::Head => self.lr_head,
            ParamRole::Noise => self.lr_noise,
        }
    }
}

/// Applies optimizer steps, the proximal map and mask enforcement.
#[derive(Clone, Debug)]
pub struct Stepper {
    config: TrainConfig,
    adam: Adam,
}

impl Stepper {
    pub fn new(config: TrainConfig) -> Self {
        Self {
            config,
            adam: Adam::new(config.adam),
        }
    }

    /// Adam step on every parameter in `grads`, then the group prox on the
    /// updated backbone weights (when `lambda > 0`), then the masks.
    pub fn apply(&mut self, model: &mut MultiTaskModel, grads: &BTreeMap<ParamKey, Vec<f64>>, masks: Option<&MaskSet>) -> Result<()> {
        for (&k, g) in grads {
            let lr = self.config.lr(k.role());
            let t = model.param_mut(k)?;
            if g.len() != t.numel() {
                return Err(shape_err("step", format!("{k}: gradient of {} entries for {:?}", g.len(), t.shape())));
            }
            self.adam.step(k, t.data_mut(), g, lr, self.config.weight_decay(k.role()));
        }
        if self.config.lambda > 0.0 {
            for l in 0..model.partitions().len() {
                let key = ParamKey::Backbone(l);
                if grads.contains_key(&key) {
                    let part = model.partition(l).clone();
                    prox_in_place(model.param_mut(key)?.data_mut(), self.config.lr_backbone, self.config.lambda, &part);
                }
            }
        }
        if let Some(masks) = masks {
            enforce_masks(model, masks)?;
        }
        Ok(())
    }
}

/// Zeroes every masked governed entry.
pub fn enforce_masks(model: &mut MultiTaskModel, masks: &MaskSet) -> Result<()> {
    for (id, mask) in masks {
        let key: ParamKey = id.parse()?;
        apply_mask(model.param_mut(key)?.data_mut(), mask)?;
    }
    Ok(())
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Waiting,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        if value < self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            Verdict::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Waiting
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// Mean per-task losses over a sample set, plus their combination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_task: BTreeMap<TaskId, f64>,
    pub combined: f64,
}

/// Gradient-free evaluation in chunks.
pub fn evaluate(model: &MultiTaskModel, data: &Dataset, indices: &[usize], tasks: &[TaskId]) -> Result<Evaluation> {
    if indices.is_empty() || tasks.is_empty() {
        return Err(invalid("evaluation needs samples and tasks"));
    }
    let mut sums: BTreeMap<TaskId, f64> = tasks.iter().map(|&t| (t, 0.0)).collect();
    for chunk in indices.chunks(256) {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, |_| false);
        let loss = batch_loss(&mut g, model, &bound, data, chunk, tasks)?;
        for (t, v) in loss.per_task {
            *sums.get_mut(&t).expect("task listed") += g.item(v) * chunk.len() as f64;
        }
    }
    let per_task: BTreeMap<TaskId, f64> = sums.into_iter().map(|(t, s)| (t, s / indices.len() as f64)).collect();
    let combined = if tasks.len() == 1 {
        per_task[&tasks[0]]
    } else {
        let losses: Vec<f64> = tasks.iter().map(|t| per_task[t]).collect();
        let sigmas: Vec<f64> = tasks.iter().map(|&t| model.param(ParamKey::LogSigma(t)).map(|p| p.item())).collect::<Result<_>>()?;
        combine_uncertainty_value(&losses, &sigmas)
    };
    Ok(Evaluation { per_task, combined })
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean training loss of each task over the epoch's batches.
    pub task_losses: BTreeMap<TaskId, f64>,
    pub combined_loss: f64,
    pub val_loss: f64,
    pub parameter_sparsity: f64,
    pub group_sparsity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
    pub stopped_early: bool,
}

/// Which tasks are trained, what stays fixed, and which masks are enforced.
#[derive(Clone, Copy, Debug)]
pub struct TrainScope<'a> {
    pub tasks: &'a [TaskId],
    pub frozen: &'a BTreeSet<ParamKey>,
    pub masks: Option<&'a MaskSet>,
}

/// Shared epoch loop behind [`mtl_train`] and [`finetune_masked`].
pub fn train(model: &mut MultiTaskModel, data: &Dataset, scope: TrainScope<'_>, config: &TrainConfig, rng: &mut impl Rng) -> Result<TrainReport> {
    train_with(model, data, scope, config, rng, |_, _| {})
}

/// [`train`] calling `on_epoch` with the parameters at the end of every epoch.
pub fn train_with(
    model: &mut MultiTaskModel,
    data: &Dataset,
    scope: TrainScope<'_>,
    config: &TrainConfig,
    rng: &mut impl Rng,
    mut on_epoch: impl FnMut(&MultiTaskModel, &EpochRow),
) -> Result<TrainReport> {
    config.validate()?;
    for &t in scope.tasks {
        model.task_kind(t)?;
    }
    let trainable = trainable_keys(model, scope.tasks, scope.frozen);
    let mut stepper = Stepper::new(*config);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut rows = Vec::new();
    let mut order = data.splits.train.clone();
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        order.shuffle(rng);
        let mut task_sums: BTreeMap<TaskId, f64> = scope.tasks.iter().map(|&t| (t, 0.0)).collect();
        let mut combined = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let (value, per_task, grads) = gradients(model, data, batch, scope.tasks, &trainable)?;
            stepper.apply(model, &grads, scope.masks)?;
            for (t, v) in per_task {
                *task_sums.get_mut(&t).expect("task listed") += v;
            }
            combined += value;
            batches += 1;
        }
        let val = evaluate(model, data, &data.splits.val, scope.tasks)?.combined;
        if !val.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation loss at epoch {epoch}")));
        }
        let sp = model.sparsity();
        rows.push(EpochRow {
            epoch,
            task_losses: task_sums.into_iter().map(|(t, s)| (t, s / batches as f64)).collect(),
            combined_loss: combined / batches as f64,
            val_loss: val,
            parameter_sparsity: sp.parameter_sparsity_percent,
            group_sparsity: sp.group_sparsity_percent,
        });
        on_epoch(model, rows.last().expect("row pushed"));
        match stopper.observe(epoch, val) {
            Verdict::Improved if config.restore_best => best = model.clone(),
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
            _ => {}
        }
    }
    if config.restore_best {
        *model = best;
    }
    Ok(TrainReport {
        rows,
        best_epoch: stopper.best_epoch(),
        best_val: stopper.best(),
        stopped_early,
    })
}

/// Conventional multi-task training of every parameter that serves `tasks`.
/// With `config.lambda > 0` the backbone is sparsified by the proximal step.
pub fn mtl_train(model: &mut MultiTaskModel, data: &Dataset, tasks: &[TaskId], config: &TrainConfig, rng: &mut impl Rng) -> Result<TrainReport> {
    train(
        model,
        data,
        TrainScope {
            tasks,
            frozen: &BTreeSet::new(),
            masks: None,
        },
        config,
        rng,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoublingTrial {
    pub lambda: f64,
    pub group_sparsity: f64,
    pub parameter_sparsity: f64,
}

#[derive(Clone, Debug)]
pub struct DoublingOutcome {
    /// First strength that reached the target, if any did.
    pub lambda: Option<f64>,
    pub trials: Vec<DoublingTrial>,
    /// Model trained at the accepted strength.
    pub model: Option<MultiTaskModel>,
}

/// Searches a fixed `λ` by doubling from `start`: each trial trains a copy of
/// `init` for `config.max_epochs` epochs and keeps its final parameters. The
/// search stops at the first strength whose group sparsity exceeds
/// `target_group_sparsity`, or after `max_trials` trials.
pub fn doubling_search(
    init: &MultiTaskModel,
    data: &Dataset,
    tasks: &[TaskId],
    config: &TrainConfig,
    start: f64,
    target_group_sparsity: f64,
    max_trials: usize,
    rng: &mut impl Rng,
) -> Result<DoublingOutcome> {
    if !(start > 0.0) || !start.is_finite() {
        return Err(invalid(format!("doubling search needs a positive start, got {start}")));
    }
    let mut trials = Vec::new();
    let mut lambda = start;
    for _ in 0..max_trials {
        let mut model = init.clone();
        let trial_config = TrainConfig {
            lambda,
            restore_best: false,
            patience: usize::MAX,
            ..*config
        };
        mtl_train(&mut model, data, tasks, &trial_config, rng)?;
        let sp = model.sparsity();
        trials.push(DoublingTrial {
            lambda,
            group_sparsity: sp.group_sparsity_percent,
            parameter_sparsity: sp.parameter_sparsity_percent,
        });
        log::debug!("doubling search: lambda {lambda} -> group sparsity {:.2}%", sp.group_sparsity_percent);
        if sp.group_sparsity_percent > target_group_sparsity {
            return Ok(DoublingOutcome {
                lambda: Some(lambda),
                trials,
                model: Some(model),
            });
        }
        lambda *= 2.0;
    }
    Ok(DoublingOutcome {
        lambda: None,
        trials,
        model: None,
    })
}

/// Training with masks re-applied after every optimizer step, so that
/// masked governed entries stay exactly zero. `frozen` parameters are not updated.
pub fn finetune_masked(
    model: &mut MultiTaskModel,
    masks: &MaskSet,
    tasks: &[TaskId],
    frozen: &BTreeSet<ParamKey>,
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    validate_masks(model, masks)?;
    enforce_masks(model, masks)?;
    train(model, data, TrainScope { tasks, frozen, masks: Some(masks) }, config, rng)
}

/// Checks that every mask names a backbone weight of matching size.
pub fn validate_masks(model: &MultiTaskModel, masks: &MaskSet) -> Result<()> {
    for (id, m) in masks {
        let key: ParamKey = id.parse()?;
        if key.role() != ParamRole::Backbone {
            return Err(invalid(format!("mask on non-governed parameter {id}")));
        }
        let t = model.param(key)?;
        if t.numel() != m.len() {
            return Err(shape_err("finetune_masked", format!("{id}: mask of {} entries for {:?}", m.len(), t.shape())));
        }
    }
    Ok(())
}
