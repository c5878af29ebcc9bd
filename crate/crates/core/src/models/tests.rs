use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small(residual: bool, channels: Vec<usize>) -> MultiTaskModel {
    let config = ModelConfig {
        backbone: BackboneSpec::new(channels, 3, residual).unwrap(),
        head_width: 16,
        image: [8, 8],
        sparsity_mode: SparsityMode::Structured,
    };
    MultiTaskModel::new(config, &[(0, TaskKind::Regression), (1, TaskKind::BinaryClassification)], &mut rng(7)).unwrap()
}

fn inputs(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn pooled(model: &MultiTaskModel, x: &[f64], batch: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, |_| false);
    let c = model.config().backbone.in_channels();
    let xv = g.constant(&[batch, c, 8, 8], x.to_vec()).unwrap();
    let f = model.features(&mut g, &b, xv).unwrap();
    g.value(f).to_vec()
}

/// Naive direct convolution, stride 1, zero padding 1, 3×3 kernel.
fn conv_ref(x: &[f64], c_in: usize, w: &[f64], c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * 64];
    for o in 0..c_out {
        for i in 0..8i64 {
            for j in 0..8i64 {
                let mut acc = 0.0;
                for c in 0..c_in {
                    for di in 0..3i64 {
                        for dj in 0..3i64 {
                            let (y, z) = (i + di - 1, j + dj - 1);
                            if (0..8).contains(&y) && (0..8).contains(&z) {
                                acc += x[c * 64 + (y * 8 + z) as usize] * w[((o * c_in + c) * 3 + di as usize) * 3 + dj as usize];
                            }
                        }
                    }
                }
                out[o * 64 + (i * 8 + j) as usize] = acc;
            }
        }
    }
    out
}

#[test]
fn zeroed_middle_layer_passes_skip_path_through() {
    let mut m = small(true, vec![4, 8, 8]);
    m.set_param(ParamKey::Backbone(1), vec![0.0; 8 * 8 * 9]).unwrap();
    let x = inputs(4 * 64, 1);
    let h1: Vec<f64> = conv_ref(&x, 4, m.param(ParamKey::Backbone(0)).unwrap().data(), 8)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let expect: Vec<f64> = h1.chunks(64).map(|c| c.iter().sum::<f64>() / 64.0).collect();
    for (a, b) in pooled(&m, &x, 1).iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zeroed_layer_without_skip_kills_signal() {
    for layer in 0..2 {
        let mut m = small(false, vec![4, 8, 8]);
        let n = m.param(ParamKey::Backbone(layer)).unwrap().numel();
        m.set_param(ParamKey::Backbone(layer), vec![0.0; n]).unwrap();
        assert!(pooled(&m, &inputs(2 * 4 * 64, 2), 2).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn skip_width_mismatch_is_rejected() {
    assert!(BackboneSpec::new(vec![4, 8, 6], 3, true).is_err());
    assert!(BackboneSpec::new(vec![4, 8, 6], 3, false).is_ok());
    assert!(BackboneSpec::new(vec![4, 8], 3, false).is_err());
}

#[test]
fn default_model_builds_fast_and_runs_a_batch() {
    let t = std::time::Instant::now();
    let config = ModelConfig {
        backbone: BackboneSpec::new(vec![4, 8, 8, 8], 3, true).unwrap(),
        ..ModelConfig::desk(4, SparsityMode::Structured).unwrap()
    };
    let m = MultiTaskModel::new(config, &[(0, TaskKind::Regression)], &mut rng(0)).unwrap();
    assert!(t.elapsed().as_secs_f64() < 0.05, "build took {:?}", t.elapsed());
    let y = m.forward(0, &inputs(16 * 4 * 64, 3), 16).unwrap();
    assert_eq!(y.len(), 16);
    assert!(y.iter().all(|v| v.is_finite()));
}

#[test]
fn head_parameters_are_disjoint_across_tasks() {
    let mut m = small(true, vec![4, 8, 8]);
    let x = inputs(3 * 4 * 64, 4);
    let before = m.forward(0, &x, 3).unwrap();
    let key = ParamKey::Head { task: 1, slot: HeadSlot::Fc1Weight };
    let perturbed: Vec<f64> = m.param(key).unwrap().data().iter().map(|v| v + 0.3).collect();
    m.set_param(key, perturbed).unwrap();
    let after = m.forward(0, &x, 3).unwrap();
    assert_eq!(
        before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        after.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!(matches!(m.forward(9, &x, 3), Err(Error::UnknownTask(9))));
}

#[test]
fn zero_input_gives_zero_regression_output() {
    let m = small(true, vec![4, 8, 8]);
    assert!(m.forward(0, &vec![0.0; 2 * 4 * 64], 2).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_matches_hand_rolled_two_layer_network() {
    let m = small(false, vec![2, 3, 3]);
    let x = inputs(2 * 64, 5);
    let w = |k| m.param(k).unwrap().data().to_vec();
    let h1: Vec<f64> = conv_ref(&x, 2, &w(ParamKey::Backbone(0)), 3).into_iter().map(|v| v.max(0.0)).collect();
    let h2: Vec<f64> = conv_ref(&h1, 3, &w(ParamKey::Backbone(1)), 3).into_iter().map(|v| v.max(0.0)).collect();
    let f: Vec<f64> = h2.chunks(64).map(|c| c.iter().sum::<f64>() / 64.0).collect();
    let (w1, b1) = (w(ParamKey::Head { task: 0, slot: HeadSlot::Fc1Weight }), w(ParamKey::Head { task: 0, slot: HeadSlot::Fc1Bias }));
    let (w2, b2) = (w(ParamKey::Head { task: 0, slot: HeadSlot::Fc2Weight }), w(ParamKey::Head { task: 0, slot: HeadSlot::Fc2Bias }));
    let mut y = b2[0];
    for j in 0..16 {
        let z: f64 = (0..3).map(|i| f[i] * w1[i * 16 + j]).sum::<f64>() + b1[j];
        y += z.max(0.0) * w2[j];
    }
    let got = m.forward(0, &x, 1).unwrap()[0];
    assert!((got - y).abs() < 1e-12, "{got} vs {y}");
}

#[test]
fn masking_any_non_skip_layer_keeps_forward_alive() {
    // the skip spans layer 0 to the last layer; every later layer can be removed
    let base = small(true, vec![4, 8, 8, 8]);
    for layer in 1..3 {
        let mut m = base.clone();
        let n = m.param(ParamKey::Backbone(layer)).unwrap().numel();
        m.set_param(ParamKey::Backbone(layer), vec![0.0; n]).unwrap();
        let a = m.forward(0, &inputs(4 * 64, 10), 1).unwrap()[0];
        let b = m.forward(0, &inputs(4 * 64, 11), 1).unwrap()[0];
        assert!(a.is_finite() && b.is_finite());
        assert_ne!(a, b);
    }
}

#[test]
fn param_ids_round_trip() {
    let m = small(true, vec![4, 8, 8]);
    for k in m.params().keys() {
        assert_eq!(k.to_string().parse::<ParamKey>().unwrap(), *k);
    }
    assert!("backbone.fc.weight".parse::<ParamKey>().is_err());
    assert_eq!(m.partition(0).len(), 4);
    assert_eq!(m.governed_keys().count(), 2);
}
