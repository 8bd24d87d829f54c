//! Detector scores against independent oracles and end-to-end fits on
//! a feature bank.

use advlab::detectors::{
    detector_layers, fit_detector, fit_logistic, fit_rbf_svm, median_gamma, BuModel, Detector, DetectorConfig,
    DetectorKind, FeatureBank, LayerStats, DEFAULT_L2,
};
use advlab::nn::{LayerSpec, Network};
use advlab::tensor::Tensor;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_rows(n: usize, dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mix: Vec<f64> = (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..n)
        .map(|_| {
            let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (0..dim).map(|i| shift + (0..dim).map(|j| mix[i * dim + j] * u[j]).sum::<f64>()).collect()
        })
        .collect()
}

#[test]
fn mahalanobis_matches_dense_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dim in 1..=5 {
        let rows = gaussian_rows(60, dim, 0.5, &mut rng);
        let stats = LayerStats::fit(&rows).unwrap();

        let n = rows.len() as f64;
        let data = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        let mean = data.row_mean().transpose();
        let centred = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j] - mean[j]);
        let cov = centred.transpose() * &centred / n;
        for (i, m) in stats.means[0].iter().enumerate() {
            assert!((m - mean[i]).abs() < 1e-12);
        }
        // stored covariance = sample covariance + a tiny ridge on the diagonal
        let stored = DMatrix::from_row_slice(dim, dim, &stats.covariance);
        let ridge = (stored.clone() - &cov).diagonal();
        assert!(ridge.iter().all(|r| *r > 0.0 && *r <= 1e-4 * cov.trace() / dim as f64 + 1e-10));
        assert!((stored.clone() - &cov - DMatrix::from_diagonal(&ridge)).abs().max() < 1e-14);

        let inv = stored.try_inverse().unwrap();
        for _ in 0..5 {
            let f: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let d = DVector::from_fn(dim, |i, _| f[i] - mean[i]);
            let want = (d.transpose() * &inv * &d)[(0, 0)];
            let got = stats.score(&f).unwrap();
            assert!((got - want).abs() <= 1e-9 * want.max(1.0), "dim {dim}: {got} vs {want}");
        }
    }
}

#[test]
fn class_conditional_uses_nearest_mean() {
    let rows = vec![vec![0.0], vec![0.2], vec![10.0], vec![10.2]];
    let stats = LayerStats::fit_class_conditional(&rows, &[0, 0, 1, 1], 2).unwrap();
    assert_eq!(stats.means, vec![vec![0.1], vec![10.1]]);
    // pooled within-class variance 0.01
    let s = stats.score(&[10.1]).unwrap();
    assert_eq!(s, 0.0);
    let far = stats.score(&[0.3]).unwrap();
    assert!((far - 0.04 / stats.covariance[0]).abs() < 1e-12);
    assert!(LayerStats::fit_class_conditional(&rows, &[0, 0, 0, 0], 2).is_err());
}

fn logistic_gradient(rows: &[Vec<f64>], labels: &[bool], w: &[f64], b: f64) -> (Vec<f64>, f64) {
    let n = rows.len() as f64;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (r, &y) in rows.iter().zip(labels) {
        let z: f64 = w.iter().zip(r).map(|(a, v)| a * v).sum::<f64>() + b;
        let p = 1.0 / (1.0 + (-z).exp());
        let e = (p - f64::from(u8::from(y))) / n;
        for (g, v) in gw.iter_mut().zip(r) {
            *g += e * v;
        }
        gb += e;
    }
    (gw, gb)
}

#[test]
fn logistic_reaches_a_stationary_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..200 {
        let y = i % 2 == 0;
        let shift = if y { 0.6 } else { 0.0 };
        rows.push(vec![rng.gen_range(-1.0..1.0) + shift, 3.0 * rng.gen_range(-1.0..1.0) + 5.0]);
        labels.push(y);
    }
    // L2 = 0: the unpenalized log-loss gradient vanishes at the fit
    let m = fit_logistic(&rows, &labels, 0.0).unwrap();
    let (gw, gb) = logistic_gradient(&rows, &labels, &m.weights, m.bias);
    assert!(gw.iter().all(|g| g.abs() < 1e-5) && gb.abs() < 1e-5, "{gw:?} {gb}");
    assert!(m.weights[0] > 0.0);

    let shrunk = fit_logistic(&rows, &labels, 1.0).unwrap();
    assert!(shrunk.weights[0].abs() < m.weights[0].abs());
    assert!(fit_logistic(&rows, &[true; 200], DEFAULT_L2).is_err());
}

#[test]
fn svm_dual_constraints_and_margins() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // XOR layout: not linearly separable, RBF-separable
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..80 {
        let (a, b) = ((i % 2) as f64, ((i / 2) % 2) as f64);
        rows.push(vec![a + rng.gen_range(-0.1..0.1), b + rng.gen_range(-0.1..0.1)]);
        labels.push(a != b);
    }
    let c = 10.0;
    let m = fit_rbf_svm(&rows, &labels, c, median_gamma(&rows)).unwrap();
    assert!(m.coef.iter().sum::<f64>().abs() < 1e-9);
    assert!(m.coef.iter().all(|a| a.abs() <= c + 1e-12));
    for (r, &y) in rows.iter().zip(&labels) {
        assert_eq!(m.decision(r) > 0.0, y);
    }
    assert!(fit_rbf_svm(&rows, &labels[..3], c, 1.0).is_err());
}

fn small_net(seed: u64) -> Network {
    Network::new(
        vec![6],
        vec![
            LayerSpec::Affine { inputs: 6, outputs: 10 },
            LayerSpec::Relu,
            LayerSpec::Affine { inputs: 10, outputs: 8 },
            LayerSpec::Relu,
            LayerSpec::Affine { inputs: 8, outputs: 3 },
        ],
        3,
        seed,
    )
    .unwrap()
}

#[test]
fn detector_layers_are_relus_and_penultimate() {
    let net = small_net(0);
    assert_eq!(detector_layers(&net), vec![1, 3]);
    let linear = Network::new(
        vec![4],
        vec![LayerSpec::Affine { inputs: 4, outputs: 5 }, LayerSpec::Affine { inputs: 5, outputs: 2 }],
        2,
        0,
    )
    .unwrap();
    assert_eq!(detector_layers(&linear), vec![0]);
}

#[test]
fn bu_edge_cases() {
    let net = small_net(2);
    let z = vec![0.5; 8];
    assert_eq!(BuModel { passes: 1, rate: 0.3 }.score(&net, &z, 0).unwrap(), 0.0);
    assert_eq!(BuModel { passes: 20, rate: 0.0 }.score(&net, &z, 0).unwrap(), 0.0);
    assert!(BuModel { passes: 0, rate: 0.3 }.score(&net, &z, 0).is_err());
    assert!(BuModel { passes: 5, rate: 1.0 }.score(&net, &z, 0).is_err());
    let s = BuModel::default().score(&net, &z, 3).unwrap();
    assert!(s > 0.0);
    assert_eq!(s, BuModel::default().score(&net, &z, 3).unwrap());
}

fn bank(seed: u64) -> (Network, FeatureBank) {
    let net = small_net(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| Tensor::vector((0..6).map(|_| rng.gen_range(lo..hi)).collect());
    let train: Vec<Tensor> = (0..90).map(|_| img(&mut rng, 0.3, 0.7)).collect();
    let labels: Vec<usize> = train.iter().map(|x| net.predict(x).unwrap()).collect();
    let clean: Vec<Tensor> = (0..40).map(|_| img(&mut rng, 0.3, 0.7)).collect();
    // far outside the clean range: every detector should separate these
    let adv: Vec<Tensor> = (0..40).map(|_| img(&mut rng, 2.0, 3.0)).collect();
    let bank = FeatureBank::build(&net, &train, &labels, &clean, &adv, "bim", 0.01).unwrap();
    (net, bank)
}

#[test]
fn every_detector_separates_gross_outliers_and_round_trips() {
    let (net, bank) = bank(5);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let img = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| Tensor::vector((0..6).map(|_| rng.gen_range(lo..hi)).collect());
    let clean: Vec<Tensor> = (0..30).map(|_| img(&mut rng, 0.3, 0.7)).collect();
    let adv: Vec<Tensor> = (0..30).map(|_| img(&mut rng, 2.0, 3.0)).collect();
    let cfg = DetectorConfig { lid_k: 10, ..DetectorConfig::default() };
    for kind in DetectorKind::ALL {
        let det = fit_detector(kind, &bank, &cfg).unwrap();
        assert_eq!(det.kind(), kind);
        let score = |x: &Tensor| det.score(&net, x, 9).unwrap();
        let pos: Vec<f64> = adv.iter().map(score).collect();
        let neg: Vec<f64> = clean.iter().map(score).collect();
        let auc = advlab::evalkit::auc(&pos, &neg).unwrap();
        // BU reads dropout variance, which grows with feature magnitude
        assert!(auc > 0.9, "{}: AUC {auc}", kind.name());

        let back = Detector::from_json(&det.to_json()).unwrap();
        for x in clean.iter().chain(&adv).take(10) {
            assert_eq!(back.score(&net, x, 9).unwrap(), det.score(&net, x, 9).unwrap());
        }
    }
    let text = fit_detector(DetectorKind::Kd, &bank, &cfg).unwrap().to_json().replacen(
        "\"format_version\": 1",
        "\"format_version\": 7",
        1,
    );
    assert!(Detector::from_json(&text).is_err());
}

#[test]
fn learned_detectors_need_adversarial_rows() {
    let net = small_net(1);
    let x = vec![Tensor::vector(vec![0.5; 6]); 4];
    let labels: Vec<usize> = x.iter().map(|t| net.predict(t).unwrap()).collect();
    let bank = FeatureBank::build(&net, &x, &labels, &x, &[], "bim", 0.01).unwrap();
    for kind in [DetectorKind::Lid, DetectorKind::Maha, DetectorKind::Svm, DetectorKind::Dnn] {
        assert!(fit_detector(kind, &bank, &DetectorConfig::default()).is_err(), "{}", kind.name());
    }
}

#[test]
fn detector_names_parse() {
    for kind in DetectorKind::ALL {
        assert_eq!(DetectorKind::from_name(&kind.name().to_uppercase()).unwrap(), kind);
    }
    assert!(DetectorKind::from_name("nope").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mahalanobis_is_nonnegative_and_zero_at_the_mean(seed in 0u64..500, dim in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = gaussian_rows(30, dim, 0.0, &mut rng);
        let stats = LayerStats::fit(&rows).unwrap();
        prop_assert!(stats.score(&stats.means[0].clone()).unwrap().abs() < 1e-12);
        for r in &rows {
            prop_assert!(stats.score(r).unwrap() >= 0.0);
        }
    }
}
