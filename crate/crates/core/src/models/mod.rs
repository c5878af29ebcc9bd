//! Shared convolutional backbone with one residual connection, plus small
//! dense heads, one per task.
//!
//! Every trainable tensor lives in one ordered map keyed by [`ParamKey`], so
//! optimizers, checkpoints and meta-learning copies treat the model as a flat
//! parameter set. A forward pass binds the tensors into a [`Graph`] first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::sparsity::{measure, GovernedLayer, GroupPartition, LayerKind, MaskTarget, SparsityMetrics, SparsityMode};

pub type TaskId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    BinaryClassification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HeadSlot {
    Fc1Weight,
    Fc1Bias,
    Fc2Weight,
    Fc2Bias,
}

impl HeadSlot {
    pub const ALL: [HeadSlot; 4] = [HeadSlot::Fc1Weight, HeadSlot::Fc1Bias, HeadSlot::Fc2Weight, HeadSlot::Fc2Bias];

    fn suffix(self) -> &'static str {
        match self {
            HeadSlot::Fc1Weight => "fc1.weight",
            HeadSlot::Fc1Bias => "fc1.bias",
            HeadSlot::Fc2Weight => "fc2.weight",
            HeadSlot::Fc2Bias => "fc2.bias",
        }
    }
}

/// Identifies one trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKey {
    /// Kernel of backbone conv layer `l` (0-based).
    Backbone(usize),
    Head { task: TaskId, slot: HeadSlot },
    /// `log σ` of a task's uncertainty weight.
    LogSigma(TaskId),
}

/// Which learning rate and update rule a parameter follows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Backbone,
    Head,
    Noise,
}

impl ParamKey {
    pub fn role(self) -> ParamRole {
        match self {
            ParamKey::Backbone(_) => ParamRole::Backbone,
            ParamKey::Head { .. } => ParamRole::Head,
            ParamKey::LogSigma(_) => ParamRole::Noise,
        }
    }

    pub fn task(self) -> Option<TaskId> {
        match self {
            ParamKey::Backbone(_) => None,
            ParamKey::Head { task, .. } | ParamKey::LogSigma(task) => Some(task),
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamKey::Backbone(l) => write!(f, "backbone.conv{l}.weight"),
            ParamKey::Head { task, slot } => write!(f, "head{task}.{}", slot.suffix()),
            ParamKey::LogSigma(t) => write!(f, "task{t}.log_sigma"),
        }
    }
}

impl FromStr for ParamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || invalid(format!("unrecognized parameter id {s:?}"));
        if let Some(rest) = s.strip_prefix("backbone.conv") {
            let l = rest.strip_suffix(".weight").ok_or_else(bad)?;
            return Ok(ParamKey::Backbone(l.parse().map_err(|_| bad())?));
        }
        if let Some(rest) = s.strip_prefix("head") {
            let (t, suffix) = rest.split_once('.').ok_or_else(bad)?;
            let slot = HeadSlot::ALL.into_iter().find(|h| h.suffix() == suffix).ok_or_else(bad)?;
            return Ok(ParamKey::Head {
                task: t.parse().map_err(|_| bad())?,
                slot,
            });
        }
        if let Some(rest) = s.strip_prefix("task") {
            let t = rest.strip_suffix(".log_sigma").ok_or_else(bad)?;
            return Ok(ParamKey::LogSigma(t.parse().map_err(|_| bad())?));
        }
        Err(bad())
    }
}

/// Shape of the shared backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// `[C_in, c_1, ..., c_L]`.
    pub channels: Vec<usize>,
    /// Square odd kernel size; padding keeps the spatial size.
    pub kernel: usize,
    /// Adds the first layer's activations to the last layer's pre-activation.
    pub residual: bool,
}

impl BackboneSpec {
    pub fn new(channels: Vec<usize>, kernel: usize, residual: bool) -> Result<Self> {
        if channels.len() < 3 {
            return Err(invalid(format!("backbone needs at least 2 conv layers, got channels {channels:?}")));
        }
        if channels.contains(&0) {
            return Err(invalid(format!("zero channel width in {channels:?}")));
        }
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(invalid(format!("kernel size must be odd, got {kernel}")));
        }
        if residual && channels[1] != channels[channels.len() - 1] {
            return Err(shape_err(
                "build_backbone",
                format!("skip connects {} channels to {} channels", channels[1], channels[channels.len() - 1]),
            ));
        }
        Ok(Self {
            channels,
            kernel,
            residual,
        })
    }

    pub fn layers(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn kernel_shape(&self, l: usize) -> [usize; 4] {
        [self.channels[l + 1], self.channels[l], self.kernel, self.kernel]
    }

    pub fn feature_width(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    pub fn in_channels(&self) -> usize {
        self.channels[0]
    }
}

/// Desk-scale architecture settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub head_width: usize,
    pub image: [usize; 2],
    pub sparsity_mode: SparsityMode,
}

impl ModelConfig {
    /// Three 3×3 conv layers of width 8 with a skip from the first to the
    /// last, and heads of width 16, for `in_channels`-channel 8×8 inputs.
    pub fn desk(in_channels: usize, sparsity_mode: SparsityMode) -> Result<Self> {
        Ok(Self {
            backbone: BackboneSpec::new(vec![in_channels, 8, 8, 8], 3, true)?,
            head_width: 16,
            image: [8, 8],
            sparsity_mode,
        })
    }
}

/// Uniform Xavier/Glorot initialization bound.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fan-in and fan-out of a weight tensor (`[out, in, kh, kw]` or `[in, out]`).
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [o, i, kh, kw] => (i * kh * kw, o * kh * kw),
        [i, o] => (*i, *o),
        _ => {
            let n = shape.iter().product();
            (n, n)
        }
    }
}

fn xavier(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let (fi, fo) = fans(shape);
    let b = xavier_bound(fi, fo);
    Tensor::from_fn(shape, |_| rng.random_range(-b..b))
}

/// Graph variables of a bound model, keyed like the model's parameters.
pub type Bound = BTreeMap<ParamKey, Var>;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskModel {
    config: ModelConfig,
    tasks: BTreeMap<TaskId, TaskKind>,
    params: BTreeMap<ParamKey, Tensor>,
    partitions: Vec<GroupPartition>,
}

impl MultiTaskModel {
    pub fn new(config: ModelConfig, tasks: &[(TaskId, TaskKind)], rng: &mut impl Rng) -> Result<Self> {
        if config.head_width == 0 || config.image.contains(&0) {
            return Err(invalid("head width and image extents must be positive"));
        }
        let mut params = BTreeMap::new();
        let mut partitions = Vec::new();
        for l in 0..config.backbone.layers() {
            let shape = config.backbone.kernel_shape(l);
            let key = ParamKey::Backbone(l);
            partitions.push(GroupPartition::for_weight(key.to_string(), &shape, config.sparsity_mode)?);
            params.insert(key, xavier(&shape, rng));
        }
        let mut model = Self {
            config,
            tasks: BTreeMap::new(),
            params,
            partitions,
        };
        for &(t, kind) in tasks {
            model.add_task(t, kind, rng)?;
        }
        Ok(model)
    }

    /// Attaches a freshly initialized head and `log σ = 0` for a new task.
    pub fn add_task(&mut self, task: TaskId, kind: TaskKind, rng: &mut impl Rng) -> Result<()> {
        if self.tasks.contains_key(&task) {
            return Err(invalid(format!("task {task} already has a head")));
        }
        let c = self.config.backbone.feature_width();
        let w = self.config.head_width;
        self.params.insert(ParamKey::Head { task, slot: HeadSlot::Fc1Weight }, xavier(&[c, w], rng));
        self.params.insert(ParamKey::Head { task, slot: HeadSlot::Fc1Bias }, Tensor::zeros(&[w]));
        self.params.insert(ParamKey::Head { task, slot: HeadSlot::Fc2Weight }, xavier(&[w, 1], rng));
        self.params.insert(ParamKey::Head { task, slot: HeadSlot::Fc2Bias }, Tensor::zeros(&[1]));
        self.params.insert(ParamKey::LogSigma(task), Tensor::scalar(0.0));
        self.tasks.insert(task, kind);
        Ok(())
    }

    /// Resets every `log σ` to 0 (σ = 1).
    pub fn reset_sigmas(&mut self) {
        for (k, t) in self.params.iter_mut() {
            if k.role() == ParamRole::Noise {
                t.data_mut()[0] = 0.0;
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> &BTreeMap<TaskId, TaskKind> {
        &self.tasks
    }

    pub fn task_kind(&self, task: TaskId) -> Result<TaskKind> {
        self.tasks.get(&task).copied().ok_or(Error::UnknownTask(task))
    }

    pub fn params(&self) -> &BTreeMap<ParamKey, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<ParamKey, Tensor> {
        &mut self.params
    }

    pub fn param(&self, key: ParamKey) -> Result<&Tensor> {
        self.params.get(&key).ok_or_else(|| invalid(format!("no parameter {key}")))
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Result<&mut Tensor> {
        self.params.get_mut(&key).ok_or_else(|| invalid(format!("no parameter {key}")))
    }

    /// Overwrites one parameter, keeping its shape.
    pub fn set_param(&mut self, key: ParamKey, data: Vec<f64>) -> Result<()> {
        let t = self.param_mut(key)?;
        if data.len() != t.numel() {
            return Err(shape_err("set_param", format!("{key}: {} entries for shape {:?}", data.len(), t.shape())));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn sigma(&self, task: TaskId) -> Result<f64> {
        Ok(self.param(ParamKey::LogSigma(task))?.item().exp())
    }

    /// Partition of backbone layer `l`.
    pub fn partition(&self, l: usize) -> &GroupPartition {
        &self.partitions[l]
    }

    pub fn partitions(&self) -> &[GroupPartition] {
        &self.partitions
    }

    /// Keys of the governed (penalized) tensors, in layer order.
    pub fn governed_keys(&self) -> impl Iterator<Item = ParamKey> {
        (0..self.config.backbone.layers()).map(ParamKey::Backbone)
    }

    pub fn governed_layers(&self) -> Vec<GovernedLayer<'_>> {
        let [h, w] = self.config.image;
        (0..self.config.backbone.layers())
            .map(|l| {
                let [c_out, c_in, kh, kw] = self.config.backbone.kernel_shape(l);
                GovernedLayer {
                    partition: &self.partitions[l],
                    data: self.params[&ParamKey::Backbone(l)].data(),
                    kind: LayerKind::Conv {
                        c_out,
                        c_in,
                        kh,
                        kw,
                        h_out: h,
                        w_out: w,
                    },
                }
            })
            .collect()
    }

    pub fn mask_targets(&self) -> Vec<MaskTarget<'_>> {
        self.governed_layers()
            .into_iter()
            .map(|l| MaskTarget {
                partition: l.partition,
                data: l.data,
            })
            .collect()
    }

    pub fn sparsity(&self) -> SparsityMetrics {
        measure(&self.governed_layers()).expect("model geometry is consistent by construction")
    }

    /// Registers the parameters in `g`; `trainable` selects those that get gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamKey) -> bool) -> Bound {
        self.params
            .iter()
            .map(|(&k, t)| {
                let v = g.input(t.shape(), t.data().to_vec(), trainable(k)).expect("parameter tensors are well formed");
                (k, v)
            })
            .collect()
    }

    /// Pooled backbone features `[batch, C]` for inputs `[batch, C_in, H, W]`.
    pub fn features(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let spec = &self.config.backbone;
        let pad = spec.kernel / 2;
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != spec.in_channels() || shape[2..] != self.config.image {
            return Err(shape_err(
                "forward",
                format!(
                    "expected [batch, {}, {}, {}], got {shape:?}",
                    spec.in_channels(),
                    self.config.image[0],
                    self.config.image[1]
                ),
            ));
        }
        let layers = spec.layers();
        let mut h = x;
        let mut first = None;
        for l in 0..layers {
            let z = g.conv2d(h, bound[&ParamKey::Backbone(l)], pad)?;
            let z = match (l + 1 == layers, spec.residual, first) {
                (true, true, Some(skip)) => g.add(z, skip)?,
                _ => z,
            };
            h = g.relu(z);
            if l == 0 {
                first = Some(h);
            }
        }
        // global average pool: [B, C, H, W] -> [B*C, HW] · 1/HW -> [B, C]
        let (b, c) = (shape[0], spec.feature_width());
        let hw = self.config.image[0] * self.config.image[1];
        let flat = g.reshape(h, &[b * c, hw])?;
        let pool = g.constant(&[hw, 1], vec![1.0 / hw as f64; hw])?;
        let pooled = g.matmul(flat, pool)?;
        g.reshape(pooled, &[b, c])
    }

    /// Head output `[batch, 1]` of one task: a regression value or a logit.
    pub fn head(&self, g: &mut Graph, bound: &Bound, features: Var, task: TaskId) -> Result<Var> {
        self.task_kind(task)?;
        let p = |slot| bound[&ParamKey::Head { task, slot }];
        let z = g.matmul(features, p(HeadSlot::Fc1Weight))?;
        let z = g.add(z, p(HeadSlot::Fc1Bias))?;
        let z = g.relu(z);
        let z = g.matmul(z, p(HeadSlot::Fc2Weight))?;
        g.add(z, p(HeadSlot::Fc2Bias))
    }

    /// Gradient-free predictions of one task for a flat `[batch, C_in, H, W]` input.
    pub fn forward(&self, task: TaskId, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.task_kind(task)?;
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let [h, w] = self.config.image;
        let x = g.constant(&[batch, self.config.backbone.in_channels(), h, w], inputs.to_vec())?;
        let f = self.features(&mut g, &bound, x)?;
        let y = self.head(&mut g, &bound, f, task)?;
        Ok(g.value(y).to_vec())
    }
}

#[cfg(test)]
mod tests;
