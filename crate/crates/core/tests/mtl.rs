use std::collections::BTreeSet;

use metasparse::harness::{dataset, init_model, stream_rng, streams, Mode, RunConfig};
use metasparse::models::{ParamKey, TaskId};
use metasparse::mtl::{doubling_search, mtl_train, train, TrainConfig, TrainScope};

#[test]
fn single_task_training_loss_decreases_over_the_first_five_epochs() {
    let c = RunConfig::desk(Mode::SingleTask);
    let mut decreasing = 0;
    for seed in 0..5 {
        let data = dataset(&c, seed).unwrap();
        let spec = vec![(0, data.task(0).unwrap().kind)];
        let mut model = init_model(&c, &data, &spec, seed).unwrap();
        let cfg = TrainConfig { max_epochs: 5, ..TrainConfig::desk() };
        let report = mtl_train(&mut model, &data, &[0], &cfg, &mut stream_rng(seed, streams::TRAIN)).unwrap();
        let losses: Vec<f64> = report.rows.iter().map(|r| r.combined_loss).collect();
        if losses.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 1);
}

#[test]
fn no_penalty_means_no_sparsity_at_any_epoch() {
    let c = RunConfig::desk(Mode::Mtl);
    let data = dataset(&c, 0).unwrap();
    let mut model = init_model(&c, &data, &data.base_tasks(), 0).unwrap();
    let ids: Vec<TaskId> = data.base_tasks().iter().map(|t| t.0).collect();
    let cfg = TrainConfig { max_epochs: 10, ..TrainConfig::desk() };
    let report = mtl_train(&mut model, &data, &ids, &cfg, &mut stream_rng(0, streams::TRAIN)).unwrap();
    assert!(report.rows.iter().all(|r| r.parameter_sparsity == 0.0 && r.group_sparsity == 0.0));
}

#[test]
fn frozen_parameters_do_not_move() {
    let c = RunConfig::desk(Mode::Mtl);
    let data = dataset(&c, 1).unwrap();
    let mut model = init_model(&c, &data, &data.base_tasks(), 1).unwrap();
    let before = model.clone();
    let ids: Vec<TaskId> = data.base_tasks().iter().map(|t| t.0).collect();
    let frozen: BTreeSet<ParamKey> = model.params().keys().copied().filter(|k| k.task() == Some(0) || *k == ParamKey::Backbone(1)).collect();
    let cfg = TrainConfig { max_epochs: 3, ..TrainConfig::desk() };
    let scope = TrainScope { tasks: &ids, frozen: &frozen, masks: None };
    train(&mut model, &data, scope, &cfg, &mut stream_rng(1, streams::TRAIN)).unwrap();
    for (k, t) in model.params() {
        if frozen.contains(k) {
            assert_eq!(t, &before.params()[k], "{k}");
        } else if k.role() != metasparse::models::ParamRole::Noise {
            assert_ne!(t, &before.params()[k], "{k}");
        }
    }
}

#[test]
fn doubling_search_reaches_half_the_groups_within_fifty_epochs() {
    let c = RunConfig::desk(Mode::Mtl);
    let data = dataset(&c, 0).unwrap();
    let init = init_model(&c, &data, &data.base_tasks(), 0).unwrap();
    let ids: Vec<TaskId> = data.base_tasks().iter().map(|t| t.0).collect();
    let cfg = TrainConfig { max_epochs: 50, ..TrainConfig::desk() };
    let out = doubling_search(&init, &data, &ids, &cfg, 0.01, 50.0, 12, &mut stream_rng(0, streams::TRAIN)).unwrap();
    let lambda = out.lambda.expect("some strength reaches the target");
    let last = out.trials.last().unwrap();
    assert_eq!(last.lambda, lambda);
    assert!(last.group_sparsity > 50.0);
    assert!(out.trials[..out.trials.len() - 1].iter().all(|t| t.group_sparsity <= 50.0));
    assert!(out.trials.windows(2).all(|w| w[1].lambda == 2.0 * w[0].lambda));
    assert_eq!(out.model.unwrap().sparsity().group_sparsity_percent, last.group_sparsity);
}
