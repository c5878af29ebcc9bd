use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::meta::Regime;
use crate::models::{ModelConfig, MultiTaskModel, ParamKey, TaskKind};
use crate::sparsity::{mask_sparsity_percent, SparsityMode};

fn err_of(text: &str) -> Error {
    RunConfig::parse(text).expect_err(text)
}

#[test]
fn mode_specific_fields_are_required_or_rejected() {
    for bad in [
        "mode = \"sparse\"",
        "mode = \"mtl\"\nlambda = 0.1",
        "mode = \"mtl_fixed_sparsity\"",
        "mode = \"mtl_fixed_sparsity\"\nlambda = -0.5",
        "mode = \"mtl_fixed_sparsity\"\nlambda = 0.0",
        "mode = \"meta_baseline\"\nregrow_prob = 0.2",
        "mode = \"meta_sparsity\"\nregrow_prob = 1.0",
        "mode = \"mtl\"\nschedule = \"one_shot\"",
        "mode = \"baseline_schedule\"\nschedule = \"one_shot\"\nmask_strategy = \"magnitude_groups\"",
        "mode = \"baseline_schedule\"\nschedule = \"one_shot\"\nmask_strategy = \"magnitude_groups\"\nbudget = 100.0",
        "mode = \"baseline_schedule\"\nschedule = \"one_shot\"\nmask_strategy = \"magnitude_groups\"\nbudget = 50.0\nsteps = 2",
        "mode = \"baseline_schedule\"\nschedule = \"iterative\"\nmask_strategy = \"magnitude_groups\"\nbudget = 50.0\nprune_interval = 2",
        "mode = \"baseline_schedule\"\nschedule = \"progressive\"\nmask_strategy = \"magnitude_groups\"\nbudget = 50.0\ndense_checkpoint = \"x\"",
        "mode = \"baseline_schedule\"\nschedule = \"one_shot\"\nmask_strategy = \"random_groups\"\nbudget = 50.0\n[meta]\nkappa = 2",
        "mode = \"mtl\"\ntask = 1",
        "mode = \"single_task\"\ntask = 7",
        "mode = \"mtl\"\nregime = \"same_tasks\"",
        "mode = \"mtl\"\nseeds = []",
        "mode = \"mtl\"\nseeds = [1, 1]",
        "mode = \"mtl\"\nlearning_rate = 0.1",
        "mode = \"mtl\"\n[train]\nlr = 0.1",
        "mode = \"mtl\"\n[train]\nlr_backbone = -1.0",
    ] {
        let e = err_of(bad);
        assert!(matches!(e, Error::Config(_)), "{bad}: {e}");
        assert_eq!(exit_code(&e), 2);
    }
}

#[test]
fn minimal_configs_parse_with_defaults() {
    let c = RunConfig::parse("mode = \"meta_sparsity\"").unwrap();
    assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
    assert_eq!(c.meta_config(), crate::meta::MetaConfig::default());
    assert_eq!(c.train, crate::mtl::TrainConfig::default());
    let c = RunConfig::parse("mode = \"baseline_schedule\"\nschedule = \"sparse_training\"\nmask_strategy = \"meta_mask\"\nbudget = \"meta_achieved\"").unwrap();
    assert_eq!(c.budget, Some(Budget::Keyword(BudgetKeyword::MetaAchieved)));
    assert!(c.needs_meta_run());
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    let modes = prop_oneof![
        Just(Mode::SingleTask),
        Just(Mode::Mtl),
        Just(Mode::MtlFixedSparsity),
        Just(Mode::MetaBaseline),
        Just(Mode::MetaSparsity),
        Just(Mode::BaselineSchedule),
    ];
    let schedules = prop_oneof![
        Just(Schedule::OneShot),
        Just(Schedule::Iterative),
        Just(Schedule::Progressive),
        Just(Schedule::SparseTraining)
    ];
    let sources = prop_oneof![Just(MaskSource::MagnitudeGroups), Just(MaskSource::RandomGroups), Just(MaskSource::MetaMask)];
    (
        modes,
        schedules,
        sources,
        0.0..99.9f64,
        1e-6..10.0f64,
        0.0..0.99f64,
        proptest::collection::btree_set(0u64..1000, 1..6),
        1usize..6,
        1e-6..1e-1f64,
    )
        .prop_map(|(mode, schedule, source, budget, lambda, rp, seeds, steps, lr)| {
            let mut c = RunConfig::desk(mode);
            c.seeds = seeds.into_iter().collect();
            c.train.lr_head = lr;
            match mode {
                Mode::SingleTask => {
                    c.task = Some(steps % 4);
                    c.lambda = Some(lambda);
                }
                Mode::MtlFixedSparsity => c.lambda = Some(lambda),
                Mode::MetaSparsity => {
                    c.regrow_prob = Some(rp);
                    c.regime = Some(Regime::AllTasksPlusNew);
                    c.sparsity_mode = SparsityMode::Unstructured;
                }
                Mode::BaselineSchedule => {
                    c.schedule = Some(schedule);
                    c.mask_strategy = Some(source);
                    c.budget = Some(if source == MaskSource::MetaMask {
                        Budget::Keyword(BudgetKeyword::MetaAchieved)
                    } else {
                        Budget::Percent(budget)
                    });
                    if matches!(schedule, Schedule::Iterative | Schedule::Progressive) {
                        c.steps = Some(steps);
                    }
                    if schedule == Schedule::Progressive {
                        c.prune_interval = Some(steps + 1);
                    }
                    if source == MaskSource::MetaMask {
                        c.meta = Some(crate::meta::MetaConfig::desk());
                    }
                }
                _ => {}
            }
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn config_round_trips_through_toml(c in arb_config()) {
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash().unwrap(), c.hash().unwrap());
    }
}

#[test]
fn hash_changes_with_any_field() {
    let a = RunConfig::desk(Mode::Mtl);
    let mut b = a.clone();
    b.train.patience += 1;
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    assert_eq!(a.hash().unwrap(), a.clone().hash().unwrap());
    assert_eq!(a.hash().unwrap().len(), 64);
}

#[test]
fn overrides_set_nested_keys_with_typed_values() {
    let mut t: toml::Table = "mode = \"mtl\"\n[train]\nlr_backbone = 0.1".parse().unwrap();
    apply_override(&mut t, "train.lr_backbone", "0.002").unwrap();
    apply_override(&mut t, "train.max_epochs", "7").unwrap();
    apply_override(&mut t, "mode", "mtl_fixed_sparsity").unwrap();
    apply_override(&mut t, "lambda", "0.25").unwrap();
    apply_override(&mut t, "meta.adam.beta2", "0.9").unwrap();
    let c = RunConfig::from_table(t.clone()).unwrap_err();
    assert!(c.to_string().contains("meta"), "{c}");
    t.remove("meta");
    let c = RunConfig::from_table(t).unwrap();
    assert_eq!(c.train.lr_backbone, 0.002);
    assert_eq!(c.train.max_epochs, 7);
    assert_eq!(c.mode, Mode::MtlFixedSparsity);
    assert_eq!(c.lambda, Some(0.25));
}

fn toy_model(seed: u64) -> MultiTaskModel {
    let cfg = ModelConfig::desk(8, SparsityMode::Structured).unwrap();
    let tasks = [(0, TaskKind::Regression), (3, TaskKind::BinaryClassification)];
    MultiTaskModel::new(cfg, &tasks, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut model = toy_model(1);
    model.param_mut(ParamKey::Backbone(0)).unwrap().data_mut()[..72].fill(0.0);
    let mut rng = stream_rng(9, 3);
    for _ in 0..17 {
        let _: u64 = rand::Rng::random(&mut rng);
    }
    let mut ck = Checkpoint::from_model(&model, &"ab".repeat(32)).unwrap();
    ck.masks = zero_pattern(&model).unwrap();
    ck.lambda_raw = -0.3;
    ck.beta = 2.0;
    ck.rng = Some(RngState::capture(&rng));
    ck.profile = vec![crate::sparsity::ProfilePoint {
        epoch: 4,
        parameter_sparsity_percent: 1.5,
        group_sparsity_percent: 2.5,
    }];
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_model().unwrap(), model);
    assert_eq!(back.config_hash_hex(), "ab".repeat(32));
    // the restored generator continues the same sequence
    let mut restored = back.rng.unwrap().restore();
    for _ in 0..5 {
        assert_eq!(rand::Rng::random::<u64>(&mut restored), rand::Rng::random::<u64>(&mut rng));
    }
    assert_eq!(mask_sparsity_percent(&back.masks), 100.0 / 24.0);

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
    let mut bad = bytes.clone();
    bad[4] = 99;
    assert!(Checkpoint::from_bytes(&bad).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.mspk");
    ck.write(&p).unwrap();
    assert_eq!(Checkpoint::read(&p).unwrap(), ck);
    assert!(matches!(ck.write(&p), Err(Error::ArtifactExists(_))));
}

#[test]
fn stat_of_single_and_constant_columns() {
    assert_eq!(Stat::of(&[0.3]), Stat { mean: 0.3, std: 0.0 });
    assert_eq!(Stat::of(&[0.1; 5]), Stat { mean: 0.1, std: 0.0 });
    let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
}

fn fake_record(seed: u64, loss: f64, sparsity: f64, steps: usize, tasks: &[usize]) -> RunRecord {
    let model = toy_model(seed);
    RunRecord {
        version: 1,
        config_hash: "f".repeat(64),
        mode: Mode::MetaSparsity,
        label: "meta_sparsity".into(),
        seed,
        rows: (0..steps)
            .map(|i| MetricRow {
                step: i,
                phase: Phase::Meta,
                epoch: i,
                stage: 0,
                train_loss: 1.0,
                val_loss: 1.0,
                lambda: Some(0.5),
                parameter_sparsity: sparsity * i as f64 / steps as f64,
                group_sparsity: 0.0,
            })
            .collect(),
        final_sparsity: crate::sparsity::SparsityMetrics {
            parameter_sparsity_percent: sparsity,
            ..model.sparsity()
        },
        zero_groups: BTreeMap::new(),
        test: tasks.iter().map(|&t| (t, loss + t as f64)).collect(),
        lambda: Some(0.5),
        achieved_budget: None,
        stop: None,
        wall_clock_secs: seed as f64,
    }
}

#[test]
fn report_aggregates_per_config() {
    let one = report(&[fake_record(0, 0.2, 30.0, 10, &[0, 1])]).unwrap();
    assert_eq!(one.rows.len(), 1);
    let row = &one.rows[0];
    assert!(row.test.values().all(|s| s.std == 0.0));
    assert_eq!(row.parameter_sparsity.std, 0.0);
    assert!(one.csv.starts_with(REPORT_HEADER_COMMENT));

    let recs: Vec<RunRecord> = (0..5).map(|s| fake_record(s, 0.1 * s as f64, 40.0, 5 + s as usize * 3, &[0, 1])).collect();
    let r = report(&recs).unwrap();
    assert_eq!(r.rows[0].parameter_sparsity, Stat { mean: 40.0, std: 0.0 });
    assert_eq!(r.rows[0].lambda, Some(Stat { mean: 0.5, std: 0.0 }));
    assert!(r.rows[0].test[&0].std > 0.0);
    assert_eq!(r.x_max, 5 + 4 * 3 - 1);
    assert!(r.svg.contains(&format!("data-x-max=\"{}\"", r.x_max)));
    assert_eq!(r.svg.matches("<polyline").count(), 5);

    let mixed = [fake_record(0, 0.1, 1.0, 3, &[0, 1]), fake_record(1, 0.1, 1.0, 3, &[0, 1, 4])];
    assert!(report(&mixed).is_err());
    assert!(report(&[]).is_err());
}

#[test]
fn profile_csv_round_trips_with_version_line() {
    let rec = fake_record(2, 0.3, 12.0, 6, &[0]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.csv");
    write_profile_csv(&p, &rec.rows).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next(), Some(CSV_HEADER_COMMENT));
    assert_eq!(text.lines().nth(1), Some("step,phase,epoch,stage,train_loss,val_loss,lambda,parameter_sparsity,group_sparsity"));
    assert_eq!(read_profile_csv(&p).unwrap(), rec.rows);
    assert!(matches!(write_profile_csv(&p, &rec.rows), Err(Error::ArtifactExists(_))));
}

#[test]
fn magnitude_masks_prune_the_weakest_group_first() {
    let mut model = toy_model(3);
    let w = model.param_mut(ParamKey::Backbone(1)).unwrap().data_mut();
    // input channel 5 of layer 1: entries (o, 5, :, :)
    for o in 0..8 {
        for k in 0..9 {
            w[o * 72 + 5 * 9 + k] = 1e-9;
        }
    }
    let quantum = 100.0 / 24.0;
    let out = next_mask(&model, None, MaskSpec::Magnitude, 0.5 * quantum, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.achieved_percent, quantum);
    let m = &out.masks["backbone.conv1.weight"];
    assert!((0..8).all(|o| (0..9).all(|k| !m[o * 72 + 5 * 9 + k])));
    assert_eq!(m.iter().filter(|&&b| !b).count(), 72);

    let zero = next_mask(&model, None, MaskSpec::Magnitude, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(zero.masks.values().flatten().all(|&b| b));
}

#[test]
fn achieved_budget_is_the_next_group_quantum() {
    let model = toy_model(4);
    let quantum = 100.0 / 24.0;
    for budget in [0.0, 1.0, quantum, 10.0, 33.3, 50.0, 80.0, 99.0] {
        for spec in [MaskSpec::Magnitude, MaskSpec::Random] {
            let out = next_mask(&model, None, spec, budget, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let expected = (budget / quantum - 1e-9).ceil().max(0.0) * quantum;
            assert!((out.achieved_percent - expected).abs() < 1e-9, "{budget}: {} vs {expected}", out.achieved_percent);
            assert!(out.achieved_percent >= budget && out.achieved_percent < budget + quantum);
        }
    }
}

#[test]
fn meta_spec_reproduces_the_meta_pattern_at_its_budget() {
    let mut meta_model = toy_model(5);
    for (l, channels) in [(0usize, [1usize, 6]), (2, [0, 3])] {
        let w = model_weight(&mut meta_model, l);
        for o in 0..8 {
            for c in channels {
                w[o * 72 + c * 9..o * 72 + c * 9 + 9].fill(0.0);
            }
        }
    }
    let pattern = zero_pattern(&meta_model).unwrap();
    let target = mask_sparsity_percent(&pattern);
    let other = toy_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let full = next_mask(&other, None, MaskSpec::Meta(&pattern), target, &mut rng).unwrap();
    assert_eq!(full.masks, pattern);
    // a smaller budget takes a subset; asking for more stops at the pattern
    let half = next_mask(&other, None, MaskSpec::Meta(&pattern), target / 2.0, &mut rng).unwrap();
    assert!(half.masks.iter().all(|(k, m)| m.iter().zip(&pattern[k]).all(|(kept, meta_kept)| *kept || !*meta_kept)));
    assert!((half.achieved_percent - target / 2.0).abs() < 1e-9);
    let over = next_mask(&other, Some(&half.masks), MaskSpec::Meta(&pattern), 90.0, &mut rng).unwrap();
    assert_eq!(over.masks, pattern);
}

fn model_weight(model: &mut MultiTaskModel, l: usize) -> &mut [f64] {
    model.param_mut(ParamKey::Backbone(l)).unwrap().data_mut()
}

#[test]
fn labels_name_the_distinguishing_fields() {
    let mut c = RunConfig::desk(Mode::BaselineSchedule);
    c.schedule = Some(Schedule::Iterative);
    c.mask_strategy = Some(MaskSource::RandomGroups);
    c.budget = Some(Budget::Percent(40.0));
    assert_eq!(c.label(), "baseline_schedule/iterative/random_groups");
    let mut m = RunConfig::desk(Mode::MetaSparsity);
    m.regrow_prob = Some(0.2);
    assert_eq!(m.label(), "meta_sparsity/rp0.2");
}
