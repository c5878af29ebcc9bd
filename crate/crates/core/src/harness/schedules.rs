//! Conventional sparsification schedules used as baselines for the meta mask.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{invalid, Result};
use crate::models::{MultiTaskModel, TaskId};
use crate::mtl::{enforce_masks, finetune_masked, EpochRow, TrainConfig};
use crate::sparsity::{extend_mask, mask_sparsity_percent, MaskOutcome, MaskSet, MaskStrategy, MaskTarget};
use crate::synth::Dataset;

/// Where pruned groups come from.
#[derive(Clone, Copy, Debug)]
pub enum MaskSpec<'a> {
    Magnitude,
    Random,
    /// Only groups fully masked in this pattern are pruned, lowest current norm first.
    Meta(&'a MaskSet),
}

#[derive(Clone, Debug)]
pub struct ScheduleOutcome {
    pub model: MultiTaskModel,
    pub masks: MaskSet,
    pub achieved_percent: f64,
    /// Mask sparsity after each prune event.
    pub events: Vec<f64>,
    /// Training rows of every phase, in order, tagged with the prune event they follow.
    pub rows: Vec<(usize, EpochRow)>,
}

/// Grows `existing` towards `budget` with groups chosen by `spec`.
pub fn next_mask(model: &MultiTaskModel, existing: Option<&MaskSet>, spec: MaskSpec<'_>, budget: f64, rng: &mut impl Rng) -> Result<MaskOutcome> {
    let targets = model.mask_targets();
    match spec {
        MaskSpec::Magnitude => extend_mask(&targets, existing, MaskStrategy::MagnitudeGroups, budget, rng),
        MaskSpec::Random => extend_mask(&targets, existing, MaskStrategy::RandomGroups, budget, rng),
        MaskSpec::Meta(meta) => {
            // Groups the meta pattern keeps get an infinite norm so they sort last;
            // capping the budget at the meta sparsity means they are never reached.
            let shadow: Vec<Vec<f64>> = targets
                .iter()
                .map(|t| {
                    let id = t.partition.parameter_id();
                    let m = meta.get(id).ok_or_else(|| invalid(format!("meta mask has no entry for {id}")))?;
                    if m.len() != t.data.len() {
                        return Err(invalid(format!("meta mask for {id} has {} entries, tensor has {}", m.len(), t.data.len())));
                    }
                    let mut d = t.data.to_vec();
                    for g in t.partition.groups() {
                        if g.iter().any(|&i| m[i]) {
                            for &i in g {
                                d[i] = f64::INFINITY;
                            }
                        }
                    }
                    Ok(d)
                })
                .collect::<Result<_>>()?;
            let shadow_targets: Vec<MaskTarget<'_>> = targets
                .iter()
                .zip(&shadow)
                .map(|(t, d)| MaskTarget { partition: t.partition, data: d })
                .collect();
            let cap = mask_sparsity_percent(meta);
            let mut out = extend_mask(&shadow_targets, existing, MaskStrategy::MagnitudeGroups, budget.min(cap), rng)?;
            out.achieved_percent = mask_sparsity_percent(&out.masks);
            Ok(out)
        }
    }
}

fn check_budget(budget: f64) -> Result<()> {
    if !(0.0..100.0).contains(&budget) {
        return Err(invalid(format!("budget must lie in [0, 100), got {budget}")));
    }
    Ok(())
}

/// Prunes a trained dense model once to `budget` and fine-tunes under the mask.
pub fn schedule_one_shot(
    dense: &MultiTaskModel,
    spec: MaskSpec<'_>,
    budget: f64,
    tasks: &[TaskId],
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<ScheduleOutcome> {
    schedule_iterative(dense, spec, 1, budget, tasks, data, config, rng)
}

/// Prunes a trained dense model in `steps` equal increments of the budget,
/// fine-tuning to early stopping after each.
#[allow(clippy::too_many_arguments)]
pub fn schedule_iterative(
    dense: &MultiTaskModel,
    spec: MaskSpec<'_>,
    steps: usize,
    budget: f64,
    tasks: &[TaskId],
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<ScheduleOutcome> {
    check_budget(budget)?;
    if steps == 0 {
        return Err(invalid("iterative pruning needs at least one step"));
    }
    let mut model = dense.clone();
    let mut masks: Option<MaskSet> = None;
    let mut events = Vec::new();
    let mut rows = Vec::new();
    let config = TrainConfig { lambda: 0.0, ..*config };
    for k in 1..=steps {
        let target = budget * k as f64 / steps as f64;
        let out = next_mask(&model, masks.as_ref(), spec, target, rng)?;
        events.push(out.achieved_percent);
        let report = finetune_masked(&mut model, &out.masks, tasks, &BTreeSet::new(), data, &config, rng)?;
        rows.extend(report.rows.into_iter().map(|r| (k, r)));
        masks = Some(out.masks);
    }
    finish(model, masks.expect("steps >= 1"), events, rows)
}

/// Trains from `init` and prunes `steps` times, after every `interval`
/// epochs, without waiting for convergence in between. After the last prune
/// event training continues to early stopping.
#[allow(clippy::too_many_arguments)]
pub fn schedule_progressive(
    init: &MultiTaskModel,
    spec: MaskSpec<'_>,
    steps: usize,
    interval: usize,
    budget: f64,
    tasks: &[TaskId],
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<ScheduleOutcome> {
    check_budget(budget)?;
    if steps == 0 || interval == 0 {
        return Err(invalid("progressive pruning needs at least one step and a positive interval"));
    }
    let mut model = init.clone();
    let mut masks = next_mask(&model, None, MaskSpec::Magnitude, 0.0, rng)?.masks;
    let mut events = Vec::new();
    let mut rows = Vec::new();
    let config = TrainConfig { lambda: 0.0, ..*config };
    let between = TrainConfig {
        max_epochs: interval,
        patience: usize::MAX,
        restore_best: false,
        ..config
    };
    for k in 1..=steps {
        let report = finetune_masked(&mut model, &masks, tasks, &BTreeSet::new(), data, &between, rng)?;
        rows.extend(report.rows.into_iter().map(|r| (k - 1, r)));
        let target = budget * k as f64 / steps as f64;
        let out = next_mask(&model, Some(&masks), spec, target, rng)?;
        events.push(out.achieved_percent);
        masks = out.masks;
        enforce_masks(&mut model, &masks)?;
    }
    let report = finetune_masked(&mut model, &masks, tasks, &BTreeSet::new(), data, &config, rng)?;
    rows.extend(report.rows.into_iter().map(|r| (steps, r)));
    finish(model, masks, events, rows)
}

/// Fixes the mask at `init` and trains under it from the first epoch.
pub fn schedule_sparse_training(
    init: &MultiTaskModel,
    spec: MaskSpec<'_>,
    budget: f64,
    tasks: &[TaskId],
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<ScheduleOutcome> {
    check_budget(budget)?;
    let mut model = init.clone();
    let out = next_mask(&model, None, spec, budget, rng)?;
    let config = TrainConfig { lambda: 0.0, ..*config };
    let report = finetune_masked(&mut model, &out.masks, tasks, &BTreeSet::new(), data, &config, rng)?;
    let rows = report.rows.into_iter().map(|r| (1, r)).collect();
    finish(model, out.masks, vec![out.achieved_percent], rows)
}

fn finish(model: MultiTaskModel, masks: MaskSet, events: Vec<f64>, rows: Vec<(usize, EpochRow)>) -> Result<ScheduleOutcome> {
    Ok(ScheduleOutcome {
        model,
        achieved_percent: mask_sparsity_percent(&masks),
        masks,
        events,
        rows,
    })
}
