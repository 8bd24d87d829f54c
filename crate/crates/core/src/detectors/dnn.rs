//! Ensemble of small per-layer MLP detectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{train_samples, LayerSpec, Network, TrainConfig};
use crate::rng::{derive_seed, STREAM_DETECTOR};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnnConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for DnnConfig {
    fn default() -> Self {
        DnnConfig { hidden: 32, epochs: 100, batch_size: 16, learning_rate: 0.02, momentum: 0.9 }
    }
}

/// One binary MLP over standardized features of a single layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDetector {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub net: Network,
}

impl LayerDetector {
    /// `logit_adv - logit_clean`.
    pub fn margin(&self, f: &[f64]) -> Result<f64> {
        let x: Vec<f64> = f.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        let l = self.net.logits(&Tensor::vector(x))?;
        Ok(l[1] - l[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnnModel {
    pub layers: Vec<LayerDetector>,
}

impl DnnModel {
    pub fn score(&self, feats: &[&[f64]]) -> Result<f64> {
        self.layers.iter().zip(feats).map(|(d, f)| d.margin(f)).sum()
    }
}

/// Trains one detector per layer on `clean[layer]` (label 0) and
/// `adversarial[layer]` (label 1). Every layer uses the same seed.
pub fn fit_dnn_detector(
    clean: &[Vec<Vec<f64>>],
    adversarial: &[Vec<Vec<f64>>],
    cfg: &DnnConfig,
    seed: u64,
) -> Result<DnnModel> {
    if clean.len() != adversarial.len() {
        return Err(Error::invalid("clean and adversarial features cover different layers"));
    }
    let layers = clean.iter().zip(adversarial).map(|(c, a)| fit_layer(c, a, cfg, seed)).collect::<Result<_>>()?;
    Ok(DnnModel { layers })
}

fn fit_layer(clean: &[Vec<f64>], adv: &[Vec<f64>], cfg: &DnnConfig, seed: u64) -> Result<LayerDetector> {
    if clean.is_empty() || adv.is_empty() {
        return Err(Error::invalid("DNN detector needs clean and adversarial features"));
    }
    let d = clean[0].len();
    let rows: Vec<&Vec<f64>> = clean.iter().chain(adv).collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let inputs: Vec<Tensor> =
        rows.iter().map(|r| Tensor::vector((0..d).map(|j| (r[j] - mean[j]) / scale[j]).collect())).collect();
    let labels: Vec<usize> = (0..rows.len()).map(|i| usize::from(i >= clean.len())).collect();
    let h = cfg.hidden;
    let net = Network::new(
        vec![d],
        vec![
            LayerSpec::Affine { inputs: d, outputs: h },
            LayerSpec::Relu,
            LayerSpec::Affine { inputs: h, outputs: h },
            LayerSpec::Relu,
            LayerSpec::Affine { inputs: h, outputs: 2 },
        ],
        2,
        derive_seed(seed, STREAM_DETECTOR, 0),
    )?;
    let train = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: 0.0,
        standardize: false,
        seed: derive_seed(seed, STREAM_DETECTOR, 1),
    };
    let (net, _) = train_samples(&net, &inputs, &labels, &train)?;
    Ok(LayerDetector { mean, scale, net })
}
