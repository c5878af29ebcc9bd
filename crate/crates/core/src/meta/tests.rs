use super::*;
use crate::models::{ModelConfig, TaskKind};
use crate::mtl::TrainConfig;
use crate::sparsity::{build_mask, prox_group, MaskStrategy, SparsityMode};
use crate::synth::{generate, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

fn toy(seed: u64) -> (MultiTaskModel, Dataset) {
    let data = generate(&SynthConfig { n_samples: 100, seed, ..SynthConfig::default() }).unwrap();
    let model = MultiTaskModel::new(ModelConfig::desk(8, SparsityMode::Structured).unwrap(), &data.base_tasks(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (model, data)
}

fn fast_config() -> MetaConfig {
    MetaConfig {
        alpha_in: 0.01,
        alpha_out_backbone: 0.01,
        alpha_out_head: 0.01,
        alpha_out_noise: 0.01,
        batch_size: 5,
        max_epochs: 4,
        ..MetaConfig::default()
    }
}

#[test]
fn episodes_are_all_nonempty_subsets_in_bitmask_order() {
    let e = enumerate_episodes(&[7, 9]).unwrap();
    let sets: Vec<Vec<usize>> = e.iter().map(|e| e.tasks.clone()).collect();
    assert_eq!(sets, vec![vec![7], vec![9], vec![7, 9]]);
    assert_eq!(enumerate_episodes(&[0, 1, 2]).unwrap().len(), 7);

    // recursive include/exclude enumeration as the oracle
    fn subsets(t: &[usize]) -> Vec<Vec<usize>> {
        match t.split_first() {
            None => vec![vec![]],
            Some((&h, rest)) => {
                let tail = subsets(rest);
                let mut out = tail.clone();
                out.extend(tail.into_iter().map(|mut s| {
                    s.insert(0, h);
                    s
                }));
                out
            }
        }
    }
    let mut want: Vec<Vec<usize>> = subsets(&[0, 1, 2, 3]).into_iter().filter(|s| !s.is_empty()).collect();
    want.sort();
    let mut got: Vec<Vec<usize>> = enumerate_episodes(&[0, 1, 2, 3]).unwrap().into_iter().map(|e| e.tasks).collect();
    assert_eq!(got.len(), 15);
    got.sort();
    assert_eq!(got, want);

    assert!(enumerate_episodes(&[]).is_err());
    assert!(enumerate_episodes(&(0..11).collect::<Vec<_>>()).is_err());
    assert!(enumerate_episodes(&[1, 1]).is_err());
}

#[test]
fn episode_sampling_is_uniform() {
    let e = enumerate_episodes(&[0, 1, 2, 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts = vec![0usize; e.len()];
    let n = 10_000;
    for _ in 0..n {
        counts[sample_episode(&e, &mut rng).unwrap().bitmask as usize - 1] += 1;
    }
    let p = 1.0 / e.len() as f64;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() < 3.0 * sd, "{c}");
    }
}

fn zero_grads(m: &MultiTaskModel) -> Grads {
    m.params().iter().map(|(&k, t)| (k, vec![0.0; t.numel()])).collect()
}

#[test]
fn inner_adaptation_steps() {
    let (model, _) = toy(1);
    let same = inner_adapt(&model, 1, 0.1, |m| Ok((0.0, zero_grads(m)))).unwrap().unwrap();
    assert_eq!(same, model);

    // ½‖θ − c‖² with c = 0.3 everywhere
    let quad = |m: &MultiTaskModel| -> Result<(f64, Grads)> { Ok((0.0, m.params().iter().map(|(&k, t)| (k, t.data().iter().map(|v| v - 0.3).collect())).collect())) };
    let one = inner_adapt(&model, 1, 0.25, quad).unwrap().unwrap();
    for (k, t) in model.params() {
        for (a, b) in t.data().iter().zip(one.params()[k].data()) {
            assert_eq!(*b, a - 0.25 * (a - 0.3));
        }
    }
    let three = inner_adapt(&model, 3, 0.25, quad).unwrap().unwrap();
    for (k, t) in model.params() {
        for (a, b) in t.data().iter().zip(three.params()[k].data()) {
            let mut x = *a;
            for _ in 0..3 {
                x -= 0.25 * (x - 0.3);
            }
            assert_eq!(*b, x);
        }
    }
    assert!(inner_adapt(&model, 0, 0.1, quad).is_err());
    let nan = inner_adapt(&model, 1, 0.1, |m| Ok((f64::NAN, zero_grads(m)))).unwrap();
    assert!(nan.is_none());
}

#[test]
fn doubling_inner_steps_with_flat_support_keeps_the_meta_gradient() {
    let (model, data) = toy(2);
    let tasks = [0, 1];
    let q = &data.splits.query[..6];
    let trainable = trainable_keys(&model, &tasks, &BTreeSet::new());
    let at = |kappa| {
        let adapted = inner_adapt(&model, kappa, 0.1, |m| Ok((0.0, zero_grads(m)))).unwrap().unwrap();
        gradients(&adapted, &data, q, &tasks, &trainable).unwrap().2
    };
    assert_eq!(at(1), at(2));
}

fn zero_group(model: &mut MultiTaskModel, l: usize, g: usize) {
    let group = model.partition(l).groups()[g].clone();
    let t = model.param_mut(ParamKey::Backbone(l)).unwrap();
    for i in group {
        t.data_mut()[i] = 0.0;
    }
}

#[test]
fn regrowth_only_touches_zero_groups() {
    let (mut model, _) = toy(3);
    zero_group(&mut model, 1, 2);
    let before = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(regrow(&mut model, None, 0.0, &mut rng).unwrap(), 0);
    assert_eq!(model, before);
    assert!(regrow(&mut model, None, 1.0, &mut rng).is_err());

    let masks = build_mask(&model.mask_targets(), MaskStrategy::FromCurrentZeros, 0.0, &mut rng).unwrap().masks;
    let id = ParamKey::Backbone(1).to_string();
    let group = model.partition(1).groups()[2].clone();
    assert!(group.iter().all(|&i| !masks[&id][i]));

    let eps = 0.01;
    let mut hits = 0;
    for trial in 0..1000 {
        let mut m = before.clone();
        let mut mk = masks.clone();
        let mut r = ChaCha8Rng::seed_from_u64(trial);
        let n = regrow(&mut m, Some(&mut mk), 1.0 - eps, &mut r).unwrap();
        let norms = m.partition(1).group_norms(m.params()[&ParamKey::Backbone(1)].data());
        if norms[2] > 0.0 {
            hits += 1;
            assert_eq!(n, 1);
            assert!(group.iter().all(|&i| mk[&id][i]));
        }
        for (k, t) in before.params() {
            for (i, (a, b)) in t.data().iter().zip(m.params()[k].data()).enumerate() {
                if *k != ParamKey::Backbone(1) || !group.contains(&i) {
                    assert_eq!(a, b);
                }
            }
        }
    }
    // P(hits < 970) under Binomial(1000, 0.99) is negligible
    assert!(hits >= 970, "{hits}");
}

#[test]
fn larger_lambda_zeroes_a_superset_of_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..20 {
        let (model, _) = toy(100 + trial);
        let l = rng.random_range(0..model.partitions().len());
        let part = model.partition(l).clone();
        let data = model.params()[&ParamKey::Backbone(l)].data().to_vec();
        let (a, b) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let mut x = data.clone();
        let mut y = data;
        prox_in_place(&mut x, 0.1, lo, &part);
        prox_in_place(&mut y, 0.1, hi, &part);
        for (zx, zy) in part.zero_groups(&x).into_iter().zip(part.zero_groups(&y)) {
            assert!(!zx || zy);
        }
    }
}

#[test]
fn single_episode_update_matches_hand_assembly() {
    let (model, data) = toy(5);
    let config = MetaConfig {
        outer: OuterOptimizer::Sgd,
        lambda_init: LambdaInit::Value { lambda: 0.5 },
        ..fast_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut state = MetaState::new(model.clone(), config, &mut rng).unwrap();
    let episodes = enumerate_episodes(&[2]).unwrap();
    let mut r1 = ChaCha8Rng::seed_from_u64(11);
    let grad = accumulate_epoch(&state, &episodes, &data, &mut r1).unwrap();
    assert_eq!(grad.episodes, 2);

    // redo the same draws by hand
    let mut r2 = ChaCha8Rng::seed_from_u64(11);
    let mut sup = data.splits.support.clone();
    let mut qry = data.splits.query.clone();
    sup.shuffle(&mut r2);
    qry.shuffle(&mut r2);
    let mut sum: Grads = BTreeMap::new();
    let mut r_sum = 0.0;
    for b in 0..2 {
        let _ = r2.random_range(0..1usize);
        let s = &sup[b * 5..(b + 1) * 5];
        let q = &qry[b * 5..(b + 1) * 5];
        let keys = trainable_keys(&model, &[2], &BTreeSet::new());
        let (_, _, gs) = gradients(&model, &data, s, &[2], &keys).unwrap();
        let mut adapted = model.clone();
        for (k, g) in &gs {
            let t = adapted.param_mut(*k).unwrap();
            t.data_mut().iter_mut().zip(g).for_each(|(p, d)| *p -= 0.01 * d);
        }
        let (_, _, gq) = gradients(&adapted, &data, q, &[2], &keys).unwrap();
        for (k, g) in gq {
            let acc = sum.entry(k).or_insert_with(|| vec![0.0; g.len()]);
            acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v);
        }
        for l in 0..3 {
            r_sum += group_norm_sum(adapted.partition(l), adapted.params()[&ParamKey::Backbone(l)].data());
        }
    }
    for (k, g) in &sum {
        for (a, b) in g.iter().zip(&grad.theta[k]) {
            assert!((a / 2.0 - b).abs() < 1e-12);
        }
    }
    assert!((r_sum / 2.0 - grad.lambda).abs() < 1e-9);

    let raw = state.sparsity.lambda_raw;
    OuterUpdater::new(&config).apply(&mut state, &grad).unwrap();
    for (k, t) in model.params() {
        let mut want: Vec<f64> = t.data().to_vec();
        let wd = match k.role() {
            ParamRole::Backbone => 0.1,
            ParamRole::Head => 0.01,
            ParamRole::Noise => 0.0,
        };
        if let Some(g) = grad.theta.get(k) {
            want.iter_mut().zip(g).for_each(|(p, d)| *p -= 0.01 * (d + wd * *p));
        }
        if let ParamKey::Backbone(l) = k {
            let part = model.partition(*l);
            for group in part.groups() {
                let vals: Vec<f64> = group.iter().map(|&i| want[i]).collect();
                for (&i, v) in group.iter().zip(prox_group(&vals, 0.01, 0.5, group.len())) {
                    want[i] = v;
                }
            }
        }
        for (a, b) in want.iter().zip(state.model.params()[k].data()) {
            assert!((a - b).abs() < 1e-14, "{k}");
        }
    }
    let want_raw = raw - config.lambda_lr * softplus_grad(raw, 1.0) * grad.lambda;
    assert!((state.sparsity.lambda_raw - want_raw).abs() < 1e-15);
}

#[test]
fn lambda_stays_positive_under_aggressive_steps() {
    let (model, data) = toy(6);
    let config = MetaConfig {
        lambda_lr: 10.0,
        max_epochs: 100,
        patience: 1000,
        sparsity_patience: 1000,
        alpha_out_backbone: 1e-6,
        ..fast_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut state = MetaState::new(model, config, &mut rng).unwrap();
    let report = meta_train(&mut state, &enumerate_episodes(&[0]).unwrap(), &data, &mut rng).unwrap();
    assert!(report.rows.iter().all(|r| r.lambda > 0.0));
    assert!(state.sparsity.lambda_eff() >= 1e-8 * (1.0 - 1e-9));
}

#[test]
fn zero_penalty_weight_is_the_baseline() {
    let (model, data) = toy(7);
    let episodes = enumerate_episodes(&[0, 1, 2, 3]).unwrap();
    let run = |baseline: bool| {
        let config = MetaConfig { penalty_weight: 0.0, ..fast_config() };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut state = MetaState::new(model.clone(), config, &mut rng).unwrap();
        let report = if baseline {
            meta_train_baseline(&mut state, &episodes, &data, &mut rng).unwrap()
        } else {
            meta_train(&mut state, &episodes, &data, &mut rng).unwrap()
        };
        (state, report)
    };
    let (a, ra) = run(false);
    let (b, rb) = run(true);
    assert_eq!(a, b);
    assert_eq!(ra.rows, rb.rows);
    assert!(rb.rows.iter().all(|r| r.parameter_sparsity == 0.0));
}

fn trained_sparse_state() -> (MetaState, Dataset) {
    let (mut model, data) = toy(8);
    zero_group(&mut model, 0, 1);
    zero_group(&mut model, 1, 5);
    let config = MetaConfig {
        outer: OuterOptimizer::Sgd,
        lambda_init: LambdaInit::Value { lambda: 5.0 },
        ..fast_config()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut state = MetaState::new(model, config, &mut rng).unwrap();
    meta_train(&mut state, &enumerate_episodes(&[0, 1, 2, 3]).unwrap(), &data, &mut rng).unwrap();
    (state, data)
}

#[test]
fn meta_test_regimes() {
    let (state, data) = trained_sparse_state();
    let before = state.model.sparsity().parameter_sparsity_percent;
    assert!(before > 0.0);
    let cfg = TrainConfig { max_epochs: 3, batch_size: 10, lr_backbone: 1e-2, lr_head: 1e-2, ..TrainConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let same = meta_test(&state, Regime::SameTasks, None, &data, &cfg, &mut rng).unwrap();
    assert_eq!(same.sparsity.parameter_sparsity_percent, before);
    assert_ne!(same.model.params(), state.model.params());

    let new = (4, TaskKind::Regression);
    let only = meta_test(&state, Regime::NewTaskOnly, Some(new), &data, &cfg, &mut rng).unwrap();
    for k in state.model.params().keys().filter(|k| k.role() == ParamRole::Backbone) {
        assert_eq!(only.model.params()[k], state.model.params()[k]);
    }
    assert_eq!(only.tasks, vec![4]);
    assert!(only.test.per_task[&4].is_finite());

    let all = meta_test(&state, Regime::AllTasksPlusNew, Some(new), &data, &cfg, &mut rng).unwrap();
    assert_eq!(all.tasks, vec![0, 1, 2, 3, 4]);
    assert_eq!(all.sparsity.parameter_sparsity_percent, before);

    assert!(meta_test(&state, Regime::SameTasks, Some(new), &data, &cfg, &mut rng).is_err());
    assert!(meta_test(&state, Regime::NewTaskOnly, None, &data, &cfg, &mut rng).is_err());
    assert!(meta_test(&state, Regime::NewTaskOnly, Some((0, TaskKind::Regression)), &data, &cfg, &mut rng).is_err());
}

#[test]
fn config_validation() {
    assert!(MetaConfig::default().validate().is_ok());
    assert!(MetaConfig { kappa: 0, ..MetaConfig::default() }.validate().is_err());
    assert!(MetaConfig { regrow_prob: 1.0, ..MetaConfig::default() }.validate().is_err());
    assert!(MetaConfig { lambda_init: LambdaInit::Uniform { low: 1.0, high: 0.1 }, ..MetaConfig::default() }.validate().is_err());
    let (model, data) = toy(9);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = MetaState::new(model, MetaConfig::default(), &mut rng).unwrap();
    assert!((0.1..1.0).contains(&s.lambda()));
    assert!(meta_train(&mut s, &[], &data, &mut rng).is_err());
}
