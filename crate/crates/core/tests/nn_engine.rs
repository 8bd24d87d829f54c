//! Forward pass, closed-form gradients, training and persistence of the
//! network engine.

#![allow(clippy::needless_range_loop)]

use advlab::data::LabeledSet;
use advlab::error::Error;
use advlab::nn::{
    channel_mean_features, channel_means, load_network, network_from_json, network_to_json, save_network, softmax,
    train_classifier, LayerSpec, LossSpec, Mode, Network, Params, TrainConfig,
};
use advlab::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(outputs: usize, inputs: usize, w: &[f64], b: &[f64]) -> Option<Params> {
    Some(Params { weight: Tensor::new(vec![outputs, inputs], w.to_vec()).unwrap(), bias: Tensor::vector(b.to_vec()) })
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::vector(v.to_vec())
}

/// `inputs -> hidden (ReLU) -> classes` with random weights.
fn mlp(inputs: usize, hidden: usize, classes: usize, seed: u64) -> Network {
    Network::new(
        vec![inputs],
        vec![
            LayerSpec::Affine { inputs, outputs: hidden },
            LayerSpec::Relu,
            LayerSpec::Affine { inputs: hidden, outputs: classes },
        ],
        classes,
        seed,
    )
    .unwrap()
}

#[test]
fn identity_affine_softmax() {
    let net = Network::from_parts(
        vec![2],
        vec![LayerSpec::Affine { inputs: 2, outputs: 2 }],
        vec![params(2, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0])],
        2,
    )
    .unwrap();
    let t = net.forward(&vector(&[1.0, 0.0]), Mode::Eval, 0).unwrap();
    assert_eq!(t.logits, vec![1.0, 0.0]);
    let e = std::f64::consts::E;
    assert!((t.probs[0] - e / (e + 1.0)).abs() < 1e-15);
    assert!((t.probs[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    assert_eq!(t.layer_count(), 1);
}

#[test]
fn two_layer_relu_matches_hand_evaluation() {
    // hidden = relu([[1,-1],[2,1],[-1,0]] x + [0, -1, 0.5]); logits = [[1,2,3],[0,-1,1]] h + [0.1, 0]
    let net = Network::from_parts(
        vec![2],
        vec![LayerSpec::Affine { inputs: 2, outputs: 3 }, LayerSpec::Relu, LayerSpec::Affine { inputs: 3, outputs: 2 }],
        vec![
            params(3, 2, &[1.0, -1.0, 2.0, 1.0, -1.0, 0.0], &[0.0, -1.0, 0.5]),
            None,
            params(2, 3, &[1.0, 2.0, 3.0, 0.0, -1.0, 1.0], &[0.1, 0.0]),
        ],
        2,
    )
    .unwrap();
    let x = vector(&[0.5, 2.0]);
    // pre-activations: (-1.5, 2.0, 0.0) -> relu (0, 2, 0)
    let t = net.forward(&x, Mode::Eval, 0).unwrap();
    assert_eq!(t.activations[1].data(), &[0.0, 2.0, 0.0]);
    assert_eq!(t.logits, vec![4.1, -2.0]);
    assert_eq!(t.probs, softmax(&[4.1, -2.0]));
}

#[test]
fn construction_names_the_offending_layer() {
    let err = Network::new(
        vec![4],
        vec![LayerSpec::Affine { inputs: 4, outputs: 3 }, LayerSpec::Relu, LayerSpec::Affine { inputs: 5, outputs: 2 }],
        2,
        0,
    )
    .unwrap_err();
    match err {
        Error::LayerShape { layer, kind, .. } => assert_eq!((layer, kind.as_str()), (2, "affine")),
        other => panic!("unexpected {other}"),
    }
    let err = Network::new(vec![4], vec![LayerSpec::Affine { inputs: 4, outputs: 3 }], 2, 0).unwrap_err();
    assert!(matches!(err, Error::LayerShape { layer: 0, .. }));
    let net = mlp(4, 3, 2, 0);
    assert!(net.forward(&vector(&[1.0, 2.0]), Mode::Eval, 0).is_err());
}

#[test]
fn dropout_is_inverted_and_only_active_in_training() {
    let net = Network::new(
        vec![6],
        vec![
            LayerSpec::Affine { inputs: 6, outputs: 40 },
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::Affine { inputs: 40, outputs: 3 },
        ],
        3,
        5,
    )
    .unwrap();
    let x = vector(&[0.3, 0.1, 0.9, 0.4, 0.2, 0.7]);
    let e1 = net.forward(&x, Mode::Eval, 1).unwrap();
    let e2 = net.forward(&x, Mode::Eval, 2).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.activations[2], e1.activations[1]);
    let t1 = net.forward(&x, Mode::Train, 1).unwrap();
    assert_eq!(t1, net.forward(&x, Mode::Train, 1).unwrap());
    assert_ne!(t1.logits, net.forward(&x, Mode::Train, 2).unwrap().logits);
    for (&kept, &orig) in t1.activations[2].data().iter().zip(e1.activations[1].data()) {
        assert!(kept == 0.0 || (kept - 2.0 * orig).abs() < 1e-12);
    }
    assert!(Network::new(
        vec![2],
        vec![LayerSpec::Dropout { rate: 1.0 }, LayerSpec::Affine { inputs: 2, outputs: 2 }],
        2,
        0
    )
    .is_err());
}

#[test]
fn affine_cross_entropy_gradient_is_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let net = Network::from_parts(
        vec![4],
        vec![LayerSpec::Affine { inputs: 4, outputs: 3 }],
        vec![params(3, 4, &w, &[0.2, -0.1, 0.0])],
        3,
    )
    .unwrap();
    let x = vector(&[0.1, 0.7, 0.3, 0.9]);
    let target = 2;
    let (value, g) = net.grad_input(&x, &LossSpec::cross_entropy(target)).unwrap();
    let p = net.forward(&x, Mode::Eval, 0).unwrap().probs;
    assert!((value + p[target].ln()).abs() < 1e-12);
    for i in 0..4 {
        let want: f64 = (0..3).map(|k| w[k * 4 + i] * (p[k] - if k == target { 1.0 } else { 0.0 })).sum();
        assert!((g.data()[i] - want).abs() < 1e-12, "component {i}");
    }
}

#[test]
fn empty_loss_has_zero_gradient() {
    let net = mlp(5, 4, 3, 1);
    let (value, g) = net.grad_input(&vector(&[0.2; 5]), &LossSpec::default()).unwrap();
    assert_eq!(value, 0.0);
    assert!(g.data().iter().all(|&v| v == 0.0));
}

#[test]
fn penultimate_gradient_binary_closed_form() {
    for seed in 0..10 {
        let net = mlp(6, 5, 2, seed);
        let x = vector(&[0.1, 0.5, 0.9, 0.3, 0.2, 0.8]);
        let g = net.grad_penultimate(&x, &LossSpec::cross_entropy(1)).unwrap();
        let p = net.forward(&x, Mode::Eval, 0).unwrap().probs;
        let w = net.final_weights();
        for i in 0..5 {
            let want = (1.0 - p[1]) * (w[0][i] - w[1][i]);
            assert!((g.data()[i] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn penultimate_gradient_multiclass_closed_form() {
    for seed in 0..10 {
        let net = mlp(6, 7, 4, seed);
        let x = vector(&[0.4, 0.5, 0.1, 0.3, 0.6, 0.8]);
        let t = (seed % 4) as usize;
        let g = net.grad_penultimate(&x, &LossSpec::cross_entropy(t)).unwrap();
        let p = net.forward(&x, Mode::Eval, 0).unwrap().probs;
        let w = net.final_weights();
        for i in 0..7 {
            let want: f64 = (0..4).filter(|&k| k != t).map(|k| p[k] * (w[k][i] - w[t][i])).sum();
            assert!((g.data()[i] - want).abs() < 1e-10);
        }
    }
}

#[test]
fn penultimate_gradient_vanishes_at_certainty() {
    // logits (0, 1000): p_1 rounds to exactly 1
    let net = Network::from_parts(
        vec![1],
        vec![LayerSpec::Affine { inputs: 1, outputs: 1 }, LayerSpec::Relu, LayerSpec::Affine { inputs: 1, outputs: 2 }],
        vec![params(1, 1, &[1.0], &[0.0]), None, params(2, 1, &[0.0, 1000.0], &[0.0, 0.0])],
        2,
    )
    .unwrap();
    let x = vector(&[1.0]);
    assert_eq!(net.forward(&x, Mode::Eval, 0).unwrap().probs[1], 1.0);
    let g = net.grad_penultimate(&x, &LossSpec::cross_entropy(1)).unwrap();
    assert_eq!(g.data(), &[0.0]);
}

#[test]
fn single_layer_has_no_penultimate() {
    let net = Network::new(vec![3], vec![LayerSpec::Affine { inputs: 3, outputs: 2 }], 2, 0).unwrap();
    assert!(net.grad_penultimate(&vector(&[0.0; 3]), &LossSpec::cross_entropy(0)).is_err());
}

#[test]
fn channel_mean_examples() {
    let map = Tensor::new(vec![2, 2, 2], vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
    assert_eq!(channel_means(&map).data(), &[1.0, 2.0]);
    let v = vector(&[1.0, -2.0, 3.0, 0.0, 5.0, 6.0, 7.0, 8.0]);
    assert_eq!(channel_means(&v), v);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<f64> = (0..3 * 4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let m = channel_means(&Tensor::new(vec![3, 4, 5], data.clone()).unwrap());
    for c in 0..3 {
        let naive: f64 = data[c * 20..(c + 1) * 20].iter().sum::<f64>() / 20.0;
        assert!((m.data()[c] - naive).abs() < 1e-14);
    }

    let net = mlp(3, 4, 2, 0);
    let t = net.forward(&vector(&[0.1, 0.2, 0.3]), Mode::Eval, 0).unwrap();
    assert!(channel_mean_features(&t, 1).is_ok());
    assert!(channel_mean_features(&t, 3).is_err());
}

fn blobs(n: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let centre = if c == 0 { 0.25 } else { 0.75 };
        images.push(vector(&[centre + rng.gen_range(-0.1..0.1), centre + rng.gen_range(-0.1..0.1)]));
        labels.push(c);
    }
    LabeledSet::new(images, labels, 2).unwrap()
}

#[test]
fn logistic_model_separates_blobs() {
    let data = blobs(200, 1);
    let net = Network::new(vec![2], vec![LayerSpec::Affine { inputs: 2, outputs: 2 }], 2, 4).unwrap();
    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 16,
        learning_rate: 0.5,
        momentum: 0.9,
        standardize: true,
        seed: 2,
        ..TrainConfig::default()
    };
    let (trained, history) = train_classifier(&net, &data, &cfg).unwrap();
    assert_eq!(history.epoch_loss.len(), 60);
    assert!(history.epoch_loss.last().unwrap() < &history.epoch_loss[0]);
    assert!(advlab::nn::accuracy(&trained, &data).unwrap() >= 0.99);

    let (again, _) = train_classifier(&net, &data, &cfg).unwrap();
    assert_eq!(network_to_json(&trained), network_to_json(&again));

    let zero = TrainConfig { epochs: 0, ..cfg.clone() };
    let (same, h) = train_classifier(&net, &data, &zero).unwrap();
    assert_eq!(same.params(), net.params());
    assert!(h.epoch_loss.is_empty());

    let empty = LabeledSet::new(Vec::new(), Vec::new(), 2).unwrap();
    assert!(train_classifier(&net, &empty, &cfg).is_err());
}

#[test]
fn persistence_round_trip_is_exact() {
    let net = Network::new(
        vec![1, 6, 6],
        vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 0 },
            LayerSpec::Relu,
            LayerSpec::AvgPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dropout { rate: 0.25 },
            LayerSpec::Affine { inputs: 8, outputs: 3 },
        ],
        3,
        17,
    )
    .unwrap();
    let back = network_from_json(&network_to_json(&net)).unwrap();
    assert_eq!(back.params(), net.params());
    assert_eq!(back.layers(), net.layers());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    save_network(&net, &path).unwrap();
    assert_eq!(load_network(&path).unwrap().params(), net.params());

    let text = network_to_json(&net).replacen("\"format_version\": 1", "\"format_version\": 99", 1);
    assert!(matches!(network_from_json(&text), Err(Error::FormatVersion { found: 99, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probabilities_are_normalized(seed in 0u64..1000, xs in prop::collection::vec(-50.0f64..50.0, 4)) {
        let net = mlp(4, 6, 5, seed);
        let t = net.forward(&vector(&xs), Mode::Eval, 0).unwrap();
        prop_assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(&t.probs, &softmax(&t.logits));
        prop_assert!(t.activations.iter().all(|a| a.is_finite()));
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..1000, run_seed in 0u64..1000) {
        let net = mlp(3, 4, 2, seed);
        let x = vector(&[0.3, 0.6, 0.9]);
        prop_assert_eq!(net.forward(&x, Mode::Train, run_seed).unwrap(), net.forward(&x, Mode::Train, run_seed).unwrap());
    }
}
