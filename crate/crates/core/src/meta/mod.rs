//! Learning episodes, first-order inner adaptation, regrowth, and the
//! bilevel trainer that learns the initialization `Θ_meta` together with the
//! group-lasso strength `λ_meta`.

mod episodes;
mod test_time;

pub use episodes::{enumerate_episodes, sample_episode, Episode, MAX_TASKS};
pub use test_time::{meta_test, meta_test_with, MetaTestOutcome, Regime};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus_grad, softplus_inverse};
use crate::error::{invalid, Error, Result};
use crate::models::{fans, xavier_bound, MultiTaskModel, ParamKey, ParamRole, TaskId};
use crate::mtl::{evaluate, gradients, trainable_keys, Adam, AdamConfig, EarlyStopping, Verdict};
use crate::sparsity::{group_norm_sum, prox_in_place, MaskSet, SparsityState};
use crate::synth::Dataset;

/// Parameter gradients keyed like the model.
pub type Grads = BTreeMap<ParamKey, Vec<f64>>;

/// Copies `model` and takes `kappa` plain gradient steps of size `alpha_in`
/// using `loss_grad`. Returns `None` (after logging a warning) when the loss
/// turns non-finite, so the caller can skip the episode.
pub fn inner_adapt(
    model: &MultiTaskModel,
    kappa: usize,
    alpha_in: f64,
    mut loss_grad: impl FnMut(&MultiTaskModel) -> Result<(f64, Grads)>,
) -> Result<Option<MultiTaskModel>> {
    if kappa == 0 {
        return Err(invalid("inner adaptation needs at least one step"));
    }
    let mut adapted = model.clone();
    for step in 0..kappa {
        let (loss, grads) = match loss_grad(&adapted) {
            Ok(v) => v,
            Err(Error::Divergence(msg)) => {
                log::warn!("skipping episode: {msg}");
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
            log::warn!("skipping episode: non-finite support loss at inner step {step}");
            return Ok(None);
        }
        for (k, g) in grads {
            let t = adapted.param_mut(k)?;
            for (p, d) in t.data_mut().iter_mut().zip(g) {
                *p -= alpha_in * d;
            }
        }
    }
    Ok(Some(adapted))
}

/// [`inner_adapt`] on the episode loss of `tasks` over the support samples `batch`.
pub fn adapt_on_batch(model: &MultiTaskModel, tasks: &[TaskId], data: &Dataset, batch: &[usize], kappa: usize, alpha_in: f64) -> Result<Option<MultiTaskModel>> {
    let trainable = trainable_keys(model, tasks, &BTreeSet::new());
    inner_adapt(model, kappa, alpha_in, |m| {
        let (v, _, g) = gradients(m, data, batch, tasks, &trainable)?;
        Ok((v, g))
    })
}

/// Reinitializes every all-zero governed group with probability `r_p`
/// (Xavier-uniform, using the owning layer's fans) and reactivates its mask
/// bits. Returns the number of regrown groups.
pub fn regrow(model: &mut MultiTaskModel, mut masks: Option<&mut MaskSet>, r_p: f64, rng: &mut impl Rng) -> Result<usize> {
    if !(0.0..1.0).contains(&r_p) {
        return Err(invalid(format!("regrow probability must lie in [0, 1), got {r_p}")));
    }
    if r_p == 0.0 {
        return Ok(0);
    }
    let mut regrown = 0;
    for l in 0..model.partitions().len() {
        let key = ParamKey::Backbone(l);
        let part = model.partition(l).clone();
        let t = model.param_mut(key)?;
        let (fi, fo) = fans(t.shape());
        let bound = xavier_bound(fi, fo);
        let zero = part.zero_groups(t.data());
        for (gi, group) in part.groups().iter().enumerate() {
            if zero[gi] && rng.random_bool(r_p) {
                for &i in group {
                    t.data_mut()[i] = rng.random_range(-bound..bound);
                }
                if let Some(m) = masks.as_deref_mut().and_then(|m| m.get_mut(part.parameter_id())) {
                    for &i in group {
                        m[i] = true;
                    }
                }
                regrown += 1;
            }
        }
    }
    Ok(regrown)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterOptimizer {
    /// `Θ ← prox(Θ − α_out·G)`.
    Sgd,
    /// Adam step with the role's `α_out`, then the prox with `α_out` of the backbone.
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LambdaInit {
    /// `λ_meta` drawn uniformly from `[low, high)`.
    Uniform { low: f64, high: f64 },
    Value { lambda: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner steps per episode.
    pub kappa: usize,
    pub alpha_in: f64,
    pub alpha_out_backbone: f64,
    pub alpha_out_head: f64,
    pub alpha_out_noise: f64,
    /// L2 coefficients of the outer update.
    pub weight_decay_backbone: f64,
    pub weight_decay_head: f64,
    pub outer: OuterOptimizer,
    pub adam: AdamConfig,
    /// Step size of the `lambda_raw` update.
    pub lambda_lr: f64,
    pub lambda_init: LambdaInit,
    /// Lower bound kept on the effective `λ_meta`.
    pub lambda_floor: f64,
    /// Softplus temperature.
    pub beta: f64,
    /// Multiplies the penalty; 0 turns meta-sparsity into plain first-order MAML.
    pub penalty_weight: f64,
    pub regrow_prob: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation-loss patience.
    pub patience: usize,
    /// Epochs without a new sparsity high tolerated once sparsity appeared.
    pub sparsity_patience: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            kappa: 1,
            alpha_in: 1e-4,
            alpha_out_backbone: 1e-5,
            alpha_out_head: 1e-4,
            alpha_out_noise: 1e-4,
            weight_decay_backbone: 0.1,
            weight_decay_head: 0.01,
            outer: OuterOptimizer::Adam,
            adam: AdamConfig::default(),
            lambda_lr: 1e-5,
            lambda_init: LambdaInit::Uniform { low: 0.1, high: 1.0 },
            lambda_floor: 1e-8,
            beta: 1.0,
            penalty_weight: 1.0,
            regrow_prob: 0.0,
            batch_size: 16,
            max_epochs: 500,
            patience: 15,
            sparsity_patience: 30,
        }
    }
}

impl MetaConfig {
    /// Outer and inner step sizes for the synthetic suite: the Adam outer
    /// step and the prox share `alpha_out_backbone`, and a shorter second
    /// moment average keeps the normalized step responsive over a few hundred
    /// epochs. `λ_meta` still starts in `[0.1, 1)`.
    pub fn desk() -> Self {
        Self {
            alpha_in: 0.01,
            alpha_out_backbone: 0.01,
            alpha_out_head: 0.01,
            alpha_out_noise: 1e-3,
            adam: AdamConfig { beta2: 0.99, ..AdamConfig::default() },
            lambda_lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [self.alpha_in, self.alpha_out_backbone, self.alpha_out_head, self.alpha_out_noise, self.beta];
        if rates.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(invalid(format!("step sizes and beta must be positive, got {rates:?}")));
        }
        if self.kappa == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid("kappa, batch size and epoch budget must be positive"));
        }
        if !(self.lambda_lr >= 0.0) || !(self.penalty_weight >= 0.0) || !(self.lambda_floor > 0.0) {
            return Err(invalid("lambda step, penalty weight must be non-negative and the floor positive"));
        }
        if !(0.0..1.0).contains(&self.regrow_prob) {
            return Err(invalid(format!("regrow probability must lie in [0, 1), got {}", self.regrow_prob)));
        }
        if !(self.weight_decay_backbone >= 0.0 && self.weight_decay_head >= 0.0) {
            return Err(invalid("weight decay must be non-negative"));
        }
        if let LambdaInit::Uniform { low, high } = self.lambda_init {
            if !(0.0 < low && low < high) {
                return Err(invalid(format!("lambda init range [{low}, {high}) is empty or not positive")));
            }
        }
        if let LambdaInit::Value { lambda } = self.lambda_init {
            if !(lambda > 0.0) {
                return Err(invalid(format!("initial lambda must be positive, got {lambda}")));
            }
        }
        Ok(())
    }

    fn alpha_out(&self, role: ParamRole) -> f64 {
        match role {
            ParamRole::Backbone => self.alpha_out_backbone,
            ParamRole::Head => self.alpha_out_head,
            ParamRole::Noise => self.alpha_out_noise,
        }
    }

    fn weight_decay(&self, role: ParamRole) -> f64 {
        match role {
            ParamRole::Backbone => self.weight_decay_backbone,
            ParamRole::Head => self.weight_decay_head,
            ParamRole::Noise => 0.0,
        }
    }
}

/// Meta-parameters `Θ_meta` and the sparsity state holding `λ_meta`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub model: MultiTaskModel,
    pub sparsity: SparsityState,
    pub config: MetaConfig,
}

impl MetaState {
    /// Draws `lambda_raw` so that the effective strength follows `config.lambda_init`.
    pub fn new(model: MultiTaskModel, config: MetaConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let lambda = match config.lambda_init {
            LambdaInit::Uniform { low, high } => rng.random_range(low..high),
            LambdaInit::Value { lambda } => lambda,
        };
        Ok(Self {
            model,
            sparsity: SparsityState::new(softplus_inverse(lambda, config.beta), config.beta),
            config,
        })
    }

    /// Effective penalty strength applied by the outer prox.
    pub fn lambda(&self) -> f64 {
        self.config.penalty_weight * self.sparsity.lambda_eff()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaEpochRow {
    pub epoch: usize,
    /// Mean query loss over the episodes of the epoch.
    pub query_loss: f64,
    pub val_loss: f64,
    /// Effective `λ_meta` after the epoch's update.
    pub lambda: f64,
    pub parameter_sparsity: f64,
    pub group_sparsity: f64,
    pub episodes: usize,
    pub skipped: usize,
    pub regrown_groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    ValidationPatience,
    SparsityPatience,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaReport {
    pub rows: Vec<MetaEpochRow>,
    pub stop: StopReason,
}

/// Averaged first-order meta-gradient of one accumulation window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetaGradient {
    pub theta: Grads,
    /// Mean of `Σ_g √n^g·‖θ^g‖₂` at the adapted backbones, the derivative of
    /// the outer objective with respect to the effective `λ`.
    pub lambda: f64,
    pub query_loss: f64,
    pub episodes: usize,
    pub skipped: usize,
    pub regrown: usize,
}

/// Query-loss gradient at the adapted point of one episode, plus the
/// penalty's sensitivity to `λ` there.
pub fn episode_gradient(
    meta: &MultiTaskModel,
    episode: &Episode,
    data: &Dataset,
    support: &[usize],
    query: &[usize],
    config: &MetaConfig,
    rng: &mut impl Rng,
) -> Result<Option<(f64, Grads, f64, usize)>> {
    let mut start = meta.clone();
    let regrown = regrow(&mut start, None, config.regrow_prob, rng)?;
    let Some(adapted) = adapt_on_batch(&start, &episode.tasks, data, support, config.kappa, config.alpha_in)? else {
        return Ok(None);
    };
    let trainable = trainable_keys(&adapted, &episode.tasks, &BTreeSet::new());
    let (q, _, g) = gradients(&adapted, data, query, &episode.tasks, &trainable)?;
    let r: f64 = adapted
        .governed_keys()
        .enumerate()
        .map(|(l, k)| group_norm_sum(adapted.partition(l), adapted.params()[&k].data()))
        .sum();
    Ok(Some((q, g, r, regrown)))
}

/// Samples one episode per support/query batch pair, accumulates and averages
/// the first-order meta-gradients.
pub fn accumulate_epoch(state: &MetaState, episodes: &[Episode], data: &Dataset, rng: &mut impl Rng) -> Result<MetaGradient> {
    let bs = state.config.batch_size;
    let mut support = data.splits.support.clone();
    let mut query = data.splits.query.clone();
    support.shuffle(rng);
    query.shuffle(rng);
    let steps = support.len().div_ceil(bs).min(query.len().div_ceil(bs));
    let mut out = MetaGradient::default();
    for b in 0..steps {
        let episode = sample_episode(episodes, rng)?;
        let s = &support[b * bs..((b + 1) * bs).min(support.len())];
        let q = &query[b * bs..((b + 1) * bs).min(query.len())];
        match episode_gradient(&state.model, episode, data, s, q, &state.config, rng)? {
            None => out.skipped += 1,
            Some((loss, g, r, regrown)) => {
                for (k, gk) in g {
                    let acc = out.theta.entry(k).or_insert_with(|| vec![0.0; gk.len()]);
                    acc.iter_mut().zip(&gk).for_each(|(a, v)| *a += v);
                }
                out.lambda += r;
                out.query_loss += loss;
                out.episodes += 1;
                out.regrown += regrown;
            }
        }
    }
    if out.episodes == 0 {
        return Err(Error::Divergence("every episode of the epoch diverged".into()));
    }
    let n = out.episodes as f64;
    out.theta.values_mut().flatten().for_each(|v| *v /= n);
    out.lambda /= n;
    out.query_loss /= n;
    Ok(out)
}

/// Outer update: optimizer step on `Θ_meta`, the group prox on the backbone,
/// then a plain step on `lambda_raw` kept above the floor.
pub struct OuterUpdater {
    adam: Adam,
}

impl OuterUpdater {
    pub fn new(config: &MetaConfig) -> Self {
        Self { adam: Adam::new(config.adam) }
    }

    pub fn apply(&mut self, state: &mut MetaState, grad: &MetaGradient) -> Result<()> {
        let cfg = state.config;
        let lambda = state.lambda();
        for (&k, g) in &grad.theta {
            let (lr, wd) = (cfg.alpha_out(k.role()), cfg.weight_decay(k.role()));
            let t = state.model.param_mut(k)?;
            match cfg.outer {
                OuterOptimizer::Sgd => t.data_mut().iter_mut().zip(g).for_each(|(p, d)| *p -= lr * (d + wd * *p)),
                OuterOptimizer::Adam => self.adam.step(k, t.data_mut(), g, lr, wd),
            }
        }
        if lambda > 0.0 {
            for l in 0..state.model.partitions().len() {
                let part = state.model.partition(l).clone();
                prox_in_place(state.model.param_mut(ParamKey::Backbone(l))?.data_mut(), cfg.alpha_out_backbone, lambda, &part);
            }
        }
        let s = &mut state.sparsity;
        let g_raw = cfg.penalty_weight * softplus_grad(s.lambda_raw, s.beta) * grad.lambda;
        s.lambda_raw = (s.lambda_raw - cfg.lambda_lr * g_raw).max(softplus_inverse(cfg.lambda_floor, s.beta));
        if !s.lambda_raw.is_finite() {
            return Err(Error::Divergence("lambda became non-finite".into()));
        }
        Ok(())
    }
}

/// Meta-sparsity training. Runs epochs of episode sampling and one averaged
/// outer update each, until the epoch budget, the validation patience or the
/// sparsity patience runs out. The final (not the best) parameters are kept.
pub fn meta_train(state: &mut MetaState, episodes: &[Episode], data: &Dataset, rng: &mut impl Rng) -> Result<MetaReport> {
    meta_train_with(state, episodes, data, rng, |_, _| {})
}

/// [`meta_train`] calling `on_epoch` after every outer update.
pub fn meta_train_with(
    state: &mut MetaState,
    episodes: &[Episode],
    data: &Dataset,
    rng: &mut impl Rng,
    mut on_epoch: impl FnMut(&MetaState, &MetaEpochRow),
) -> Result<MetaReport> {
    state.config.validate()?;
    if episodes.is_empty() {
        return Err(invalid("meta-training needs at least one episode"));
    }
    let tasks: Vec<TaskId> = episodes.iter().flat_map(|e| e.tasks.iter().copied()).collect::<BTreeSet<_>>().into_iter().collect();
    for &t in &tasks {
        state.model.task_kind(t)?;
    }
    let mut updater = OuterUpdater::new(&state.config);
    let mut stopper = EarlyStopping::new(state.config.patience);
    let mut best_sparsity = 0.0;
    let mut since_sparsity_high = 0;
    let mut rows = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 0..state.config.max_epochs {
        let grad = accumulate_epoch(state, episodes, data, rng)?;
        if !grad.query_loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite meta loss at epoch {epoch}")));
        }
        updater.apply(state, &grad)?;
        let val = evaluate(&state.model, data, &data.splits.val, &tasks)?.combined;
        if !val.is_finite() {
            return Err(Error::Divergence(format!("non-finite validation loss at epoch {epoch}")));
        }
        let sp = state.model.sparsity();
        state.sparsity.record(epoch, &sp);
        rows.push(MetaEpochRow {
            epoch,
            query_loss: grad.query_loss,
            val_loss: val,
            lambda: state.lambda(),
            parameter_sparsity: sp.parameter_sparsity_percent,
            group_sparsity: sp.group_sparsity_percent,
            episodes: grad.episodes,
            skipped: grad.skipped,
            regrown_groups: grad.regrown,
        });
        on_epoch(state, rows.last().expect("row pushed"));
        log::debug!(
            "meta epoch {epoch}: query {:.4} val {val:.4} lambda {:.4} sparsity {:.2}%",
            grad.query_loss,
            state.lambda(),
            sp.parameter_sparsity_percent
        );

        if sp.parameter_sparsity_percent > best_sparsity {
            best_sparsity = sp.parameter_sparsity_percent;
            since_sparsity_high = 0;
        } else if best_sparsity > 0.0 {
            since_sparsity_high += 1;
        }
        if stopper.observe(epoch, val) == Verdict::Stop {
            stop = StopReason::ValidationPatience;
            break;
        }
        if best_sparsity > 0.0 && since_sparsity_high >= state.config.sparsity_patience {
            stop = StopReason::SparsityPatience;
            break;
        }
    }
    Ok(MetaReport { rows, stop })
}

/// First-order MAML over the same episodes with the penalty removed: learns
/// the initialization only.
pub fn meta_train_baseline(state: &mut MetaState, episodes: &[Episode], data: &Dataset, rng: &mut impl Rng) -> Result<MetaReport> {
    state.config.penalty_weight = 0.0;
    meta_train(state, episodes, data, rng)
}

#[cfg(test)]
mod tests;
