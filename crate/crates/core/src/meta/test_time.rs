use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::models::{MultiTaskModel, ParamKey, TaskId, TaskKind};
use crate::mtl::{enforce_masks, evaluate, train_with, validate_masks, EpochRow, Evaluation, TrainConfig, TrainReport, TrainScope};
use crate::sparsity::{build_mask, MaskSet, MaskStrategy, SparsityMetrics};
use crate::synth::Dataset;

use super::MetaState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Fine-tune every meta-training task again.
    SameTasks,
    /// Attach a head for an unseen task and train only that head.
    NewTaskOnly,
    /// Attach a head for an unseen task and fine-tune it with all previous tasks.
    AllTasksPlusNew,
}

#[derive(Clone, Debug)]
pub struct MetaTestOutcome {
    pub model: MultiTaskModel,
    pub masks: MaskSet,
    pub report: TrainReport,
    /// Test-split losses of the fine-tuned tasks.
    pub test: Evaluation,
    pub sparsity: SparsityMetrics,
    pub tasks: Vec<TaskId>,
}

/// Fine-tunes a copy of the meta-learned model under `regime`. The current
/// zero pattern of `Θ_meta` becomes a fixed mask, `λ_meta` is not updated and
/// no further penalty is applied. Each task's `σ` restarts at 1.
pub fn meta_test(
    state: &MetaState,
    regime: Regime,
    new_task: Option<(TaskId, TaskKind)>,
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<MetaTestOutcome> {
    meta_test_with(state, regime, new_task, data, config, rng, |_, _| {})
}

/// [`meta_test`] calling `on_epoch` with the parameters after every fine-tuning epoch.
pub fn meta_test_with(
    state: &MetaState,
    regime: Regime,
    new_task: Option<(TaskId, TaskKind)>,
    data: &Dataset,
    config: &TrainConfig,
    rng: &mut impl Rng,
    on_epoch: impl FnMut(&MultiTaskModel, &EpochRow),
) -> Result<MetaTestOutcome> {
    let mut model = state.model.clone();
    let old: Vec<TaskId> = model.tasks().keys().copied().collect();
    let masks = build_mask(&model.mask_targets(), MaskStrategy::FromCurrentZeros, 0.0, rng)?.masks;
    model.reset_sigmas();

    let mut frozen = BTreeSet::new();
    let tasks = match (regime, new_task) {
        (Regime::SameTasks, None) => old,
        (Regime::SameTasks, Some(_)) => return Err(invalid("the same-tasks regime takes no new task")),
        (_, None) => return Err(invalid(format!("regime {regime:?} needs a new task"))),
        (_, Some((id, kind))) => {
            if old.contains(&id) {
                return Err(invalid(format!("task {id} was seen during meta-training")));
            }
            model.add_task(id, kind, rng)?;
            if regime == Regime::NewTaskOnly {
                frozen = model.params().keys().copied().filter(|k| k.task() != Some(id)).collect::<BTreeSet<ParamKey>>();
                vec![id]
            } else {
                old.into_iter().chain([id]).collect()
            }
        }
    };

    let config = TrainConfig { lambda: 0.0, ..*config };
    validate_masks(&model, &masks)?;
    enforce_masks(&mut model, &masks)?;
    let scope = TrainScope {
        tasks: &tasks,
        frozen: &frozen,
        masks: Some(&masks),
    };
    let report = train_with(&mut model, data, scope, &config, rng, on_epoch)?;
    let test = evaluate(&model, data, &data.splits.test, &tasks)?;
    let sparsity = model.sparsity();
    Ok(MetaTestOutcome {
        model,
        masks,
        report,
        test,
        sparsity,
        tasks,
    })
}
