use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::meta::{MetaConfig, Regime};
use crate::models::{BackboneSpec, ModelConfig, TaskId};
use crate::mtl::TrainConfig;
use crate::sparsity::SparsityMode;
use crate::synth::SynthConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleTask,
    Mtl,
    MtlFixedSparsity,
    MetaBaseline,
    MetaSparsity,
    BaselineSchedule,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SingleTask => "single_task",
            Mode::Mtl => "mtl",
            Mode::MtlFixedSparsity => "mtl_fixed_sparsity",
            Mode::MetaBaseline => "meta_baseline",
            Mode::MetaSparsity => "meta_sparsity",
            Mode::BaselineSchedule => "baseline_schedule",
        }
    }

    pub fn is_meta(self) -> bool {
        matches!(self, Mode::MetaBaseline | Mode::MetaSparsity)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Prune a trained dense model once, then fine-tune.
    OneShot,
    /// Prune a trained dense model in `steps` rounds, fine-tuning after each.
    Iterative,
    /// Prune in `steps` rounds while training from the random initialization.
    Progressive,
    /// Fix the mask at the random initialization and train under it.
    SparseTraining,
}

impl Schedule {
    pub fn name(self) -> &'static str {
        match self {
            Schedule::OneShot => "one_shot",
            Schedule::Iterative => "iterative",
            Schedule::Progressive => "progressive",
            Schedule::SparseTraining => "sparse_training",
        }
    }

    /// Schedules that start from a trained dense model.
    pub fn needs_dense(self) -> bool {
        matches!(self, Schedule::OneShot | Schedule::Iterative)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    MagnitudeGroups,
    RandomGroups,
    /// The zero pattern of a meta-sparsity run.
    MetaMask,
}

impl MaskSource {
    pub fn name(self) -> &'static str {
        match self {
            MaskSource::MagnitudeGroups => "magnitude_groups",
            MaskSource::RandomGroups => "random_groups",
            MaskSource::MetaMask => "meta_mask",
        }
    }
}

/// Target sparsity of a schedule: a percentage, or whatever the meta run reached.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Budget {
    Percent(f64),
    Keyword(BudgetKeyword),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetKeyword {
    MetaAchieved,
}

/// Backbone widths and head size; input channels and image size come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Output channels of each conv layer.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub residual: bool,
    pub head_width: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            widths: vec![8, 8, 8],
            kernel: 3,
            residual: true,
            head_width: 16,
        }
    }
}

impl ModelSpec {
    pub fn build(&self, data: &SynthConfig, sparsity_mode: SparsityMode) -> Result<ModelConfig> {
        let channels = std::iter::once(data.channels).chain(self.widths.iter().copied()).collect();
        Ok(ModelConfig {
            backbone: BackboneSpec::new(channels, self.kernel, self.residual)?,
            head_width: self.head_width,
            image: data.image,
            sparsity_mode,
        })
    }
}

/// One experiment: a mode, its mode-specific settings, and the seeds to replicate it over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default)]
    pub sparsity_mode: SparsityMode,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Use `data.seed` for every replicate instead of the replicate's own seed.
    #[serde(default)]
    pub fixed_data: bool,

    /// Fixed group-lasso strength (single_task, mtl_fixed_sparsity).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Regrowth probability (meta_sparsity).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regrow_prob: Option<f64>,
    /// Task trained alone (single_task).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskId>,
    /// Meta-test regime (meta modes); the new task is the first held-out task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_strategy: Option<MaskSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<Budget>,
    /// Prune rounds (iterative, progressive).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Training epochs between prune rounds (progressive).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune_interval: Option<usize>,
    /// Trained dense checkpoint (one_shot, iterative); `{seed}` is substituted.
    /// Without it the dense model is trained first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_checkpoint: Option<PathBuf>,
    /// Meta-sparsity checkpoint supplying the meta mask or the meta-achieved
    /// budget; `{seed}` is substituted. Without it the meta run is done first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta_checkpoint: Option<PathBuf>,

    #[serde(default)]
    pub data: SynthConfig,
    #[serde(default)]
    pub model: ModelSpec,
    /// Supervised training and fine-tuning settings.
    #[serde(default)]
    pub train: TrainConfig,
    /// Meta-training settings (meta modes, and schedules that need a meta run).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<MetaConfig>,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// A minimal config for `mode` with default settings everywhere.
    /// Mode-specific required fields still have to be filled in.
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            sparsity_mode: SparsityMode::Structured,
            seeds: default_seeds(),
            fixed_data: false,
            lambda: None,
            regrow_prob: None,
            task: None,
            regime: None,
            schedule: None,
            mask_strategy: None,
            budget: None,
            steps: None,
            prune_interval: None,
            dense_checkpoint: None,
            meta_checkpoint: None,
            data: SynthConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            meta: None,
        }
    }

    /// Like [`RunConfig::new`] with the desk-scale step sizes of
    /// [`TrainConfig::desk`] and [`MetaConfig::desk`].
    pub fn desk(mode: Mode) -> Self {
        Self {
            train: TrainConfig::desk(),
            meta: mode.is_meta().then(MetaConfig::desk),
            ..Self::new(mode)
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        Self::from_table(value)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let config: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// Hex sha256 of the serialized config.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Meta settings with defaults filled in and the top-level regrowth probability applied.
    pub fn meta_config(&self) -> MetaConfig {
        let mut m = self.meta.unwrap_or_default();
        if let Some(r) = self.regrow_prob {
            m.regrow_prob = r;
        }
        if self.mode == Mode::MetaBaseline {
            m.penalty_weight = 0.0;
        }
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda.unwrap_or(0.0),
            ..self.train
        }
    }

    /// Whether a run of this config performs (or loads) a meta-sparsity run.
    pub fn needs_meta_run(&self) -> bool {
        self.mode == Mode::BaselineSchedule
            && (self.mask_strategy == Some(MaskSource::MetaMask) || self.budget == Some(Budget::Keyword(BudgetKeyword::MetaAchieved)))
    }

    /// Checks that the fields present are exactly those the mode uses and
    /// that every value is in range.
    pub fn validate(&self) -> Result<()> {
        let mode = self.mode;
        let reject = |present: bool, field: &str| -> Result<()> {
            if present {
                Err(config_err(format!("`{field}` does not apply to mode {}", mode.name())))
            } else {
                Ok(())
            }
        };
        let require = |present: bool, field: &str| -> Result<()> {
            if present {
                Ok(())
            } else {
                Err(config_err(format!("mode {} requires `{field}`", mode.name())))
            }
        };

        if self.seeds.is_empty() {
            return Err(config_err("the seed list is empty"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(config_err("the seed list repeats a seed"));
        }

        match mode {
            Mode::SingleTask => {}
            Mode::MtlFixedSparsity => require(self.lambda.is_some(), "lambda")?,
            _ => reject(self.lambda.is_some(), "lambda")?,
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(config_err(format!("lambda must be a non-negative number, got {l}")));
            }
            if mode == Mode::MtlFixedSparsity && l == 0.0 {
                return Err(config_err("mode mtl_fixed_sparsity needs lambda > 0"));
            }
        }
        reject(self.task.is_some() && mode != Mode::SingleTask, "task")?;
        reject(self.regrow_prob.is_some() && mode != Mode::MetaSparsity, "regrow_prob")?;
        if let Some(r) = self.regrow_prob {
            if !(0.0..1.0).contains(&r) {
                return Err(config_err(format!("regrow_prob must lie in [0, 1), got {r}")));
            }
        }
        reject(self.regime.is_some() && !mode.is_meta(), "regime")?;

        let schedule_mode = mode == Mode::BaselineSchedule;
        for (present, field) in [
            (self.schedule.is_some(), "schedule"),
            (self.mask_strategy.is_some(), "mask_strategy"),
            (self.budget.is_some(), "budget"),
        ] {
            if schedule_mode {
                require(present, field)?;
            } else {
                reject(present, field)?;
            }
        }
        let schedule = self.schedule;
        reject(
            self.steps.is_some() && !matches!(schedule, Some(Schedule::Iterative | Schedule::Progressive)),
            "steps",
        )?;
        if self.steps == Some(0) {
            return Err(config_err("steps must be at least 1"));
        }
        reject(self.prune_interval.is_some() && schedule != Some(Schedule::Progressive), "prune_interval")?;
        if self.prune_interval == Some(0) {
            return Err(config_err("prune_interval must be at least 1"));
        }
        reject(self.dense_checkpoint.is_some() && !schedule.is_some_and(Schedule::needs_dense), "dense_checkpoint")?;
        if let Some(Budget::Percent(b)) = self.budget {
            if !(0.0..100.0).contains(&b) {
                return Err(config_err(format!("budget must lie in [0, 100), got {b}")));
            }
        }
        let meta_run = self.needs_meta_run();
        reject(self.meta_checkpoint.is_some() && !meta_run, "meta_checkpoint")?;
        reject(self.meta.is_some() && !mode.is_meta() && !meta_run, "meta")?;

        if self.data.seed != SynthConfig::default().seed && !self.fixed_data {
            return Err(config_err("`data.seed` is only used together with fixed_data = true"));
        }
        if let Some(t) = self.task {
            if t >= self.data.n_tasks {
                return Err(config_err(format!("task {t} is not a base task (there are {})", self.data.n_tasks)));
            }
        }
        if matches!(self.regime, Some(Regime::NewTaskOnly | Regime::AllTasksPlusNew)) && self.data.extra_tasks == 0 {
            return Err(config_err("new-task regimes need data.extra_tasks >= 1"));
        }
        self.data.validate().map_err(|e| config_err(e.to_string()))?;
        self.model.build(&self.data, self.sparsity_mode).map_err(|e| config_err(e.to_string()))?;
        self.train_config().validate().map_err(|e| config_err(e.to_string()))?;
        if mode.is_meta() || meta_run {
            self.meta_config().validate().map_err(|e| config_err(e.to_string()))?;
        }
        Ok(())
    }

    /// Short human-readable name used for output directories and report rows.
    pub fn label(&self) -> String {
        let mut parts = vec![self.mode.name().to_string()];
        if self.sparsity_mode == SparsityMode::Unstructured {
            parts.push("unstructured".into());
        }
        if let Some(s) = self.schedule {
            parts.push(s.name().into());
        }
        if let Some(m) = self.mask_strategy {
            parts.push(m.name().into());
        }
        if let Some(t) = self.task {
            parts.push(format!("task{t}"));
        }
        if let Some(l) = self.lambda {
            parts.push(format!("lambda{l}"));
        }
        if let Some(r) = self.regrow_prob {
            if r > 0.0 {
                parts.push(format!("rp{r}"));
            }
        }
        if let Some(r) = self.regime {
            if r != Regime::SameTasks {
                parts.push(format!("{r:?}").to_lowercase());
            }
        }
        parts.join("/")
    }
}

/// Substitutes `{seed}` in a checkpoint path template.
pub fn seed_path(template: &Path, seed: u64) -> PathBuf {
    PathBuf::from(template.to_string_lossy().replace("{seed}", &seed.to_string()))
}
