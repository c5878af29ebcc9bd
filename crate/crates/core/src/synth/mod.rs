//! Synthetic multi-task data with planted channel relevance.
//!
//! Every sample is an image whose channel `c` is a constant level `a_c`
//! drawn from a standard normal plus pixel noise. A task's label depends only
//! on the spatial means of its relevant channels, so the channels that no
//! task reads are known to be prunable. Regression labels are
//! `w·pooled(relevant) + noise`; classification labels threshold the same
//! statistic at zero.

mod io;

pub use io::{read_dataset, write_dataset};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{TaskId, TaskKind};

const INPUT_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const POOL_STREAM: u64 = 2;
const TASK_STREAM_BASE: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_tasks: usize,
    /// Extra tasks generated alongside the base tasks and held out for
    /// meta-testing on a new task.
    pub extra_tasks: usize,
    /// How many of the base tasks (counted from the end) are classification.
    pub classification_tasks: usize,
    pub n_samples: usize,
    pub channels: usize,
    pub image: [usize; 2],
    /// Number of channels relevant to at least one task.
    pub channel_budget: usize,
    /// Relevant channels per task.
    pub per_task: usize,
    /// Share of each task's relevant channels common to all tasks.
    pub overlap: f64,
    pub noise_std: f64,
    /// Standard deviation of the per-pixel fluctuation around each channel's level.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            extra_tasks: 1,
            classification_tasks: 1,
            n_samples: 2000,
            channels: 8,
            image: [8, 8],
            channel_budget: 4,
            per_task: 2,
            overlap: 0.5,
            noise_std: 0.1,
            pixel_noise: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub kind: TaskKind,
    pub relevant_channels: Vec<usize>,
    /// Unit-norm weights on the pooled relevant channels.
    pub weight_vector: Vec<f64>,
    pub noise_std: f64,
    /// Seed of the label-noise stream; sample `i` uses stream `i`.
    pub noise_seed: u64,
}

impl TaskSpec {
    /// `w · pooled(relevant)` for one channel-major input.
    pub fn statistic(&self, input: &[f64], image: [usize; 2]) -> f64 {
        let hw = image[0] * image[1];
        self.relevant_channels
            .iter()
            .zip(&self.weight_vector)
            .map(|(&c, w)| w * input[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
            .sum()
    }

    /// Label of sample `sample_id`: a deterministic function of its input.
    pub fn label(&self, input: &[f64], image: [usize; 2], sample_id: usize) -> f64 {
        let noise = if self.noise_std > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
            rng.set_stream(sample_id as u64);
            let e: f64 = StandardNormal.sample(&mut rng);
            self.noise_std * e
        } else {
            0.0
        };
        let s = self.statistic(input, image) + noise;
        match self.kind {
            TaskKind::Regression => s,
            TaskKind::BinaryClassification => f64::from(u8::from(s > 0.0)),
        }
    }
}

/// Disjoint sample-index sets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl SplitDataset {
    pub fn all(&self) -> [&[usize]; 5] {
        [&self.train, &self.val, &self.test, &self.support, &self.query]
    }

    pub fn pairwise_disjoint(&self, n_samples: usize) -> bool {
        let mut seen = vec![false; n_samples];
        self.all().iter().flat_map(|s| s.iter()).all(|&i| i < n_samples && !std::mem::replace(&mut seen[i], true))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    /// Base tasks followed by the held-out extra tasks.
    pub tasks: Vec<TaskSpec>,
    pub splits: SplitDataset,
    inputs: Vec<f64>,
    /// `labels[task][sample]`.
    labels: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn sample_len(&self) -> usize {
        self.config.channels * self.config.image[0] * self.config.image[1]
    }

    pub fn n_samples(&self) -> usize {
        self.config.n_samples
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn label(&self, task: TaskId, i: usize) -> Result<f64> {
        Ok(self.labels.get(task).ok_or(Error::UnknownTask(task))?[i])
    }

    /// Stacked inputs `[indices.len(), C, H, W]`, flattened.
    pub fn inputs_of(&self, indices: &[usize]) -> Vec<f64> {
        indices.iter().flat_map(|&i| self.input(i).iter().copied()).collect()
    }

    pub fn labels_of(&self, task: TaskId, indices: &[usize]) -> Result<Vec<f64>> {
        let l = self.labels.get(task).ok_or(Error::UnknownTask(task))?;
        Ok(indices.iter().map(|&i| l[i]).collect())
    }

    pub fn task(&self, task: TaskId) -> Result<&TaskSpec> {
        self.tasks.get(task).ok_or(Error::UnknownTask(task))
    }

    /// Base tasks as `(id, kind)` pairs.
    pub fn base_tasks(&self) -> Vec<(TaskId, TaskKind)> {
        self.tasks[..self.config.n_tasks].iter().map(|t| (t.task_id, t.kind)).collect()
    }

    /// Ids of the held-out tasks.
    pub fn extra_task_ids(&self) -> Vec<TaskId> {
        (self.config.n_tasks..self.tasks.len()).collect()
    }

    /// Channels read by at least one base task.
    pub fn relevant_channels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.tasks[..self.config.n_tasks].iter().flat_map(|t| t.relevant_channels.iter().copied()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn irrelevant_channels(&self) -> Vec<usize> {
        let rel = self.relevant_channels();
        (0..self.config.channels).filter(|c| !rel.contains(c)).collect()
    }

    pub(crate) fn from_parts(config: SynthConfig, tasks: Vec<TaskSpec>, splits: SplitDataset, inputs: Vec<f64>, labels: Vec<Vec<f64>>) -> Self {
        Self {
            config,
            tasks,
            splits,
            inputs,
            labels,
        }
    }
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        validate(self)
    }
}

fn validate(c: &SynthConfig) -> Result<()> {
    let total = c.n_tasks + c.extra_tasks;
    if c.n_tasks == 0 || c.n_samples < 10 || c.channels == 0 || c.image.contains(&0) {
        return Err(invalid("need at least one task, ten samples, one channel and a non-empty image"));
    }
    if c.channel_budget == 0 || c.channel_budget >= c.channels {
        return Err(invalid(format!(
            "channel budget {} must be in 1..{} so that some channel is irrelevant",
            c.channel_budget, c.channels
        )));
    }
    if c.per_task == 0 || c.per_task > c.channel_budget {
        return Err(invalid(format!("per-task relevant count {} must be in 1..={}", c.per_task, c.channel_budget)));
    }
    if !(0.0..=1.0).contains(&c.overlap) || !(c.noise_std >= 0.0) || !(c.pixel_noise >= 0.0) {
        return Err(invalid("overlap must lie in [0, 1] and the noise levels must be non-negative"));
    }
    if c.classification_tasks > c.n_tasks || total > 64 {
        return Err(invalid("too many classification or extra tasks"));
    }
    let core = (c.overlap * c.per_task as f64).round() as usize;
    let rest = c.channel_budget - core;
    if core < c.per_task && rest == 0 {
        return Err(invalid("overlap leaves no channels for task-specific relevance"));
    }
    if rest > 0 && c.n_tasks * (c.per_task - core) < rest {
        return Err(invalid(format!(
            "{} tasks with {} specific channels each cannot cover {} relevant channels",
            c.n_tasks,
            c.per_task - core,
            rest
        )));
    }
    Ok(())
}

/// Generates task specs, inputs, labels and the five disjoint splits.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    validate(config)?;
    let c = config;
    let hw = c.image[0] * c.image[1];

    let mut perm: Vec<usize> = (0..c.channels).collect();
    perm.shuffle(&mut stream(c.seed, POOL_STREAM));
    let pool = &perm[..c.channel_budget];
    let core = (c.overlap * c.per_task as f64).round() as usize;
    let specific = &pool[core..];

    let total = c.n_tasks + c.extra_tasks;
    let mut tasks = Vec::with_capacity(total);
    let mut cursor = 0;
    for t in 0..total {
        let mut rng = stream(c.seed, TASK_STREAM_BASE + t as u64);
        let mut rel: Vec<usize> = pool[..core].to_vec();
        while rel.len() < c.per_task {
            let ch = specific[cursor % specific.len()];
            cursor += 1;
            if !rel.contains(&ch) {
                rel.push(ch);
            }
        }
        rel.sort_unstable();
        let mut w: Vec<f64> = rel
            .iter()
            .map(|_| {
                let m: f64 = rng.random_range(0.5..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        w.iter_mut().for_each(|v| *v /= norm);
        let kind = if t >= c.n_tasks - c.classification_tasks && t < c.n_tasks {
            TaskKind::BinaryClassification
        } else {
            TaskKind::Regression
        };
        tasks.push(TaskSpec {
            task_id: t,
            kind,
            relevant_channels: rel,
            weight_vector: w,
            noise_std: c.noise_std,
            noise_seed: rng.random(),
        });
    }

    let mut rng = stream(c.seed, INPUT_STREAM);
    let mut inputs = Vec::with_capacity(c.n_samples * c.channels * hw);
    for _ in 0..c.n_samples {
        for _ in 0..c.channels {
            let level: f64 = StandardNormal.sample(&mut rng);
            for _ in 0..hw {
                let e: f64 = StandardNormal.sample(&mut rng);
                inputs.push(level + c.pixel_noise * e);
            }
        }
    }
    let n = c.channels * hw;
    let labels = tasks
        .iter()
        .map(|t| (0..c.n_samples).map(|i| t.label(&inputs[i * n..(i + 1) * n], c.image, i)).collect())
        .collect();

    let mut order: Vec<usize> = (0..c.n_samples).collect();
    order.shuffle(&mut stream(c.seed, SPLIT_STREAM));
    let cut = |f: usize| c.n_samples * f / 10;
    let splits = SplitDataset {
        train: order[..cut(6)].to_vec(),
        val: order[cut(6)..cut(7)].to_vec(),
        test: order[cut(7)..cut(8)].to_vec(),
        support: order[cut(8)..cut(9)].to_vec(),
        query: order[cut(9)..].to_vec(),
    };
    Ok(Dataset::from_parts(config.clone(), tasks, splits, inputs, labels))
}
