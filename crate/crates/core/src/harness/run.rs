use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::meta::{enumerate_episodes, meta_test, meta_train, MetaReport, MetaState, Regime};
use crate::models::{MultiTaskModel, TaskId, TaskKind};
use crate::mtl::{evaluate, mtl_train, EpochRow};
use crate::sparsity::{build_mask, mask_sparsity_percent, MaskSet, MaskStrategy};
use crate::synth::{generate, Dataset, SynthConfig};

use super::checkpoint::{Checkpoint, RngState};
use super::config::{seed_path, Budget, BudgetKeyword, MaskSource, Mode, RunConfig, Schedule};
use super::record::{summarize, write_json, write_profile_csv, MetricRow, Phase, RunRecord, Summary, RECORD_VERSION};
use super::schedules::{schedule_iterative, schedule_one_shot, schedule_progressive, schedule_sparse_training, MaskSpec};

/// Independent random streams of one replicate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN: u64 = 2;
    pub const META: u64 = 3;
    pub const FINETUNE: u64 = 4;
    pub const MASK: u64 = 5;
    pub const DENSE: u64 = 6;
}

pub const DEFAULT_STEPS: usize = 3;
pub const DEFAULT_PRUNE_INTERVAL: usize = 5;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Result of one replicate before anything is written to disk.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub record: RunRecord,
    pub checkpoint: Checkpoint,
    pub model: MultiTaskModel,
    pub masks: MaskSet,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub records: Vec<RunRecord>,
    pub summary: Summary,
}

/// Meta-training of one replicate.
#[derive(Clone, Debug)]
pub struct MetaRun {
    pub state: MetaState,
    pub report: MetaReport,
    pub rng: ChaCha8Rng,
}

pub fn dataset(config: &RunConfig, seed: u64) -> Result<Dataset> {
    let seed = if config.fixed_data { config.data.seed } else { seed };
    generate(&SynthConfig { seed, ..config.data.clone() })
}

pub fn init_model(config: &RunConfig, data: &Dataset, tasks: &[(TaskId, TaskKind)], seed: u64) -> Result<MultiTaskModel> {
    let model_config = config.model.build(&data.config, config.sparsity_mode)?;
    MultiTaskModel::new(model_config, tasks, &mut stream_rng(seed, streams::INIT))
}

/// Runs meta-training on the base tasks with the config's meta settings.
pub fn meta_run(config: &RunConfig, data: &Dataset, seed: u64) -> Result<MetaRun> {
    let model = init_model(config, data, &data.base_tasks(), seed)?;
    let mut rng = stream_rng(seed, streams::META);
    let mut state = MetaState::new(model, config.meta_config(), &mut rng)?;
    let ids: Vec<TaskId> = data.base_tasks().iter().map(|t| t.0).collect();
    let episodes = enumerate_episodes(&ids)?;
    let report = meta_train(&mut state, &episodes, data, &mut rng)?;
    Ok(MetaRun { state, report, rng })
}

/// Keep-mask of the entries of the governed tensors that are not exactly zero.
pub fn zero_pattern(model: &MultiTaskModel) -> Result<MaskSet> {
    Ok(build_mask(&model.mask_targets(), MaskStrategy::FromCurrentZeros, 0.0, &mut ChaCha8Rng::seed_from_u64(0))?.masks)
}

pub fn zero_groups(model: &MultiTaskModel) -> BTreeMap<String, Vec<usize>> {
    model
        .governed_layers()
        .iter()
        .map(|l| {
            let zeros = l.partition.zero_groups(l.data);
            (l.partition.parameter_id().to_string(), zeros.iter().enumerate().filter(|z| *z.1).map(|z| z.0).collect())
        })
        .collect()
}

fn train_rows(rows: &[EpochRow], phase: Phase, stage: usize, lambda: Option<f64>) -> Vec<MetricRow> {
    rows.iter()
        .map(|r| MetricRow {
            step: 0,
            phase,
            epoch: r.epoch,
            stage,
            train_loss: r.combined_loss,
            val_loss: r.val_loss,
            lambda,
            parameter_sparsity: r.parameter_sparsity,
            group_sparsity: r.group_sparsity,
        })
        .collect()
}

fn meta_rows(report: &MetaReport, penalized: bool) -> Vec<MetricRow> {
    report
        .rows
        .iter()
        .map(|r| MetricRow {
            step: 0,
            phase: Phase::Meta,
            epoch: r.epoch,
            stage: 0,
            train_loss: r.query_loss,
            val_loss: r.val_loss,
            lambda: penalized.then_some(r.lambda),
            parameter_sparsity: r.parameter_sparsity,
            group_sparsity: r.group_sparsity,
        })
        .collect()
}

fn load_checkpoint(template: &Path, seed: u64) -> Result<Checkpoint> {
    let path = seed_path(template, seed);
    if !path.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::read(&path)
}

fn new_task(data: &Dataset) -> Result<(TaskId, TaskKind)> {
    let id = *data.extra_task_ids().first().ok_or_else(|| Error::Config("the data has no held-out task".into()))?;
    Ok((id, data.task(id)?.kind))
}

/// Executes one replicate of `config` in memory.
pub fn run_seed(config: &RunConfig, seed: u64) -> Result<SeedRun> {
    config.validate()?;
    let hash = config.hash()?;
    let started = Instant::now();
    let data = dataset(config, seed)?;
    let mut rows = Vec::new();
    let mut lambda = None;
    let mut achieved_budget = None;
    let mut stop = None;
    let mut meta_info: Option<(f64, f64, RngState, Vec<crate::sparsity::ProfilePoint>)> = None;

    let (model, masks, tasks): (MultiTaskModel, MaskSet, Vec<TaskId>) = match config.mode {
        Mode::SingleTask | Mode::Mtl | Mode::MtlFixedSparsity => {
            let specs = match config.mode {
                Mode::SingleTask => {
                    let t = config.task.unwrap_or(0);
                    vec![(t, data.task(t)?.kind)]
                }
                _ => data.base_tasks(),
            };
            let ids: Vec<TaskId> = specs.iter().map(|s| s.0).collect();
            let mut model = init_model(config, &data, &specs, seed)?;
            let train = config.train_config();
            let report = mtl_train(&mut model, &data, &ids, &train, &mut stream_rng(seed, streams::TRAIN))?;
            let penalized = train.lambda > 0.0;
            lambda = penalized.then_some(train.lambda);
            rows.extend(train_rows(&report.rows, Phase::Train, 0, lambda));
            let masks = zero_pattern(&model)?;
            (model, masks, ids)
        }
        Mode::MetaBaseline | Mode::MetaSparsity => {
            let MetaRun { state, report, rng } = meta_run(config, &data, seed)?;
            let penalized = config.mode == Mode::MetaSparsity;
            rows.extend(meta_rows(&report, penalized));
            lambda = penalized.then(|| state.lambda());
            stop = Some(format!("{:?}", report.stop));
            meta_info = Some((state.sparsity.lambda_raw, state.sparsity.beta, RngState::capture(&rng), state.sparsity.profile.clone()));
            let regime = config.regime.unwrap_or(Regime::SameTasks);
            let new = match regime {
                Regime::SameTasks => None,
                _ => Some(new_task(&data)?),
            };
            let outcome = meta_test(&state, regime, new, &data, &config.train_config(), &mut stream_rng(seed, streams::FINETUNE))?;
            rows.extend(train_rows(&outcome.report.rows, Phase::Finetune, 0, None));
            (outcome.model, outcome.masks, outcome.tasks)
        }
        Mode::BaselineSchedule => {
            let schedule = config.schedule.ok_or_else(|| Error::Config("schedule missing".into()))?;
            let source = config.mask_strategy.ok_or_else(|| Error::Config("mask_strategy missing".into()))?;
            let meta_masks = if config.needs_meta_run() {
                Some(match &config.meta_checkpoint {
                    Some(template) => {
                        let ck = load_checkpoint(template, seed)?;
                        if ck.masks.is_empty() {
                            zero_pattern(&ck.to_model()?)?
                        } else {
                            ck.masks
                        }
                    }
                    None => zero_pattern(&meta_run(config, &data, seed)?.state.model)?,
                })
            } else {
                None
            };
            let budget = match config.budget.ok_or_else(|| Error::Config("budget missing".into()))? {
                Budget::Percent(b) => b,
                Budget::Keyword(BudgetKeyword::MetaAchieved) => mask_sparsity_percent(meta_masks.as_ref().expect("meta run requested")),
            };
            let specs = data.base_tasks();
            let ids: Vec<TaskId> = specs.iter().map(|s| s.0).collect();
            let start = if schedule.needs_dense() {
                match &config.dense_checkpoint {
                    Some(template) => {
                        let model = load_checkpoint(template, seed)?.to_model()?;
                        if model.tasks().keys().copied().collect::<Vec<_>>() != ids {
                            return Err(Error::Config("the dense checkpoint was trained on other tasks".into()));
                        }
                        model
                    }
                    None => {
                        let mut model = init_model(config, &data, &specs, seed)?;
                        let dense = crate::mtl::TrainConfig { lambda: 0.0, ..config.train };
                        let report = mtl_train(&mut model, &data, &ids, &dense, &mut stream_rng(seed, streams::DENSE))?;
                        rows.extend(train_rows(&report.rows, Phase::Train, 0, None));
                        model
                    }
                }
            } else {
                init_model(config, &data, &specs, seed)?
            };
            let spec = match source {
                MaskSource::MagnitudeGroups => MaskSpec::Magnitude,
                MaskSource::RandomGroups => MaskSpec::Random,
                MaskSource::MetaMask => MaskSpec::Meta(meta_masks.as_ref().expect("meta run requested")),
            };
            let train = config.train_config();
            let mut rng = stream_rng(seed, streams::MASK);
            let steps = config.steps.unwrap_or(DEFAULT_STEPS);
            let outcome = match schedule {
                Schedule::OneShot => schedule_one_shot(&start, spec, budget, &ids, &data, &train, &mut rng)?,
                Schedule::Iterative => schedule_iterative(&start, spec, steps, budget, &ids, &data, &train, &mut rng)?,
                Schedule::Progressive => {
                    let interval = config.prune_interval.unwrap_or(DEFAULT_PRUNE_INTERVAL);
                    schedule_progressive(&start, spec, steps, interval, budget, &ids, &data, &train, &mut rng)?
                }
                Schedule::SparseTraining => schedule_sparse_training(&start, spec, budget, &ids, &data, &train, &mut rng)?,
            };
            for (stage, r) in &outcome.rows {
                rows.extend(train_rows(std::slice::from_ref(r), Phase::Finetune, *stage, None));
            }
            achieved_budget = Some(outcome.achieved_percent);
            (outcome.model, outcome.masks, ids)
        }
    };

    for (i, r) in rows.iter_mut().enumerate() {
        r.step = i;
    }
    let test = evaluate(&model, &data, &data.splits.test, &tasks)?.per_task;
    let mut checkpoint = Checkpoint::from_model(&model, &hash)?;
    checkpoint.masks = masks.clone();
    if let Some((raw, beta, rng, profile)) = meta_info {
        checkpoint.lambda_raw = raw;
        checkpoint.beta = beta;
        checkpoint.rng = Some(rng);
        checkpoint.profile = profile;
    }
    let record = RunRecord {
        version: RECORD_VERSION,
        config_hash: hash,
        mode: config.mode,
        label: config.label(),
        seed,
        rows,
        final_sparsity: model.sparsity(),
        zero_groups: zero_groups(&model),
        test,
        lambda,
        achieved_budget,
        stop,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(SeedRun {
        record,
        checkpoint,
        model,
        masks,
    })
}

/// Directory holding every artifact of `config` below `out_root`.
pub fn run_dir(config: &RunConfig, out_root: &Path) -> Result<PathBuf> {
    Ok(out_root.join(format!("{}-{}", config.mode.name(), &config.hash()?[..16])))
}

/// Runs every seed of `config` and persists, below `out_root/<mode>-<hash>/`,
/// `config.toml`, `summary.json` and per seed `seed-<s>/{checkpoint.mspk,
/// profile.csv, record.json}`. Existing artifacts are never replaced: the
/// call fails before any compute if one of them is present.
pub fn run(config: &RunConfig, out_root: &Path) -> Result<RunOutcome> {
    config.validate()?;
    let dir = run_dir(config, out_root)?;
    let summary_path = dir.join("summary.json");
    if summary_path.exists() {
        return Err(Error::ArtifactExists(summary_path.display().to_string()));
    }
    for &seed in &config.seeds {
        let d = dir.join(format!("seed-{seed}"));
        if d.exists() {
            return Err(Error::ArtifactExists(d.display().to_string()));
        }
        for template in [&config.dense_checkpoint, &config.meta_checkpoint].into_iter().flatten() {
            let p = seed_path(template, seed);
            if !p.is_file() {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
            }
        }
    }
    std::fs::create_dir_all(&dir)?;
    let text = config.to_toml()?;
    let config_path = dir.join("config.toml");
    match std::fs::read_to_string(&config_path) {
        Ok(existing) if existing != text => return Err(Error::ArtifactExists(config_path.display().to_string())),
        Ok(_) => {}
        Err(_) => std::fs::write(&config_path, &text)?,
    }

    let mut records = Vec::new();
    for &seed in &config.seeds {
        log::info!("{}: seed {seed}", config.label());
        let out = run_seed(config, seed)?;
        let d = dir.join(format!("seed-{seed}"));
        std::fs::create_dir(&d).map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => Error::ArtifactExists(d.display().to_string()),
            _ => e.into(),
        })?;
        out.checkpoint.write(&d.join("checkpoint.mspk"))?;
        write_profile_csv(&d.join("profile.csv"), &out.record.rows)?;
        write_json(&d.join("record.json"), &out.record)?;
        records.push(out.record);
    }
    let summary = summarize(&records)?;
    write_json(&summary_path, &summary)?;
    Ok(RunOutcome { dir, records, summary })
}
