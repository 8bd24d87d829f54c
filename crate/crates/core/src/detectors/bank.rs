//! Per-layer channel-mean features of the clean and adversarial pools.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{channel_mean_features, ForwardTrace, Mode, Network};
use crate::tensor::Tensor;

/// Feature rows of one sample pool: `rows[layer_pos][sample]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerFeatures {
    pub rows: Vec<Vec<Vec<f64>>>,
}

impl LayerFeatures {
    pub fn len(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layer(&self, pos: usize) -> &[Vec<f64>] {
        &self.rows[pos]
    }

    /// Features of sample `i` across all layers.
    pub fn sample(&self, i: usize) -> Vec<&[f64]> {
        self.rows.iter().map(|l| l[i].as_slice()).collect()
    }

    pub fn extend(&mut self, other: &LayerFeatures) {
        if self.rows.is_empty() {
            self.rows = other.rows.clone();
            return;
        }
        for (a, b) in self.rows.iter_mut().zip(&other.rows) {
            a.extend(b.iter().cloned());
        }
    }
}

/// Channel-mean features of `trace` at each of `layers`.
pub fn trace_features(trace: &ForwardTrace, layers: &[usize]) -> Result<Vec<Vec<f64>>> {
    layers.iter().map(|&l| channel_mean_features(trace, l).map(Tensor::into_data)).collect()
}

/// Features of every image at `layers` (eval-mode forward passes).
pub fn extract_features(net: &Network, images: &[Tensor], layers: &[usize]) -> Result<LayerFeatures> {
    let per_sample: Vec<Vec<Vec<f64>>> =
        images.par_iter().map(|x| trace_features(&net.forward(x, Mode::Eval, 0)?, layers)).collect::<Result<_>>()?;
    let mut rows = vec![Vec::with_capacity(images.len()); layers.len()];
    for sample in per_sample {
        for (pos, f) in sample.into_iter().enumerate() {
            rows[pos].push(f);
        }
    }
    Ok(LayerFeatures { rows })
}

/// Layers a detector looks at: every ReLU output plus the penultimate
/// activation, in increasing order.
pub fn detector_layers(net: &Network) -> Vec<usize> {
    let mut layers = net.activation_layers();
    if let Some(p) = net.penultimate_layer() {
        layers.push(p);
    }
    layers.sort_unstable();
    layers.dedup();
    layers
}

/// Everything the learned detectors are fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub layers: Vec<usize>,
    /// Position of the penultimate layer inside `layers`.
    pub penultimate_pos: usize,
    pub num_classes: usize,
    pub train: LayerFeatures,
    pub train_labels: Vec<usize>,
    pub adv_train_clean: LayerFeatures,
    /// Successful adversarial examples only.
    pub adv_train_adv: LayerFeatures,
    pub attack: String,
    pub epsilon: f64,
}

impl FeatureBank {
    /// Extracts the bank. `adversarial` must hold successful AEs only.
    pub fn build(
        net: &Network,
        train_images: &[Tensor],
        train_labels: &[usize],
        clean: &[Tensor],
        adversarial: &[Tensor],
        attack: &str,
        epsilon: f64,
    ) -> Result<Self> {
        let layers = detector_layers(net);
        let penultimate =
            net.penultimate_layer().ok_or_else(|| Error::invalid("detectors need a network with a hidden layer"))?;
        let penultimate_pos = layers.iter().position(|&l| l == penultimate).expect("included");
        if train_images.len() != train_labels.len() {
            return Err(Error::invalid("train images and labels differ in length"));
        }
        Ok(FeatureBank {
            penultimate_pos,
            num_classes: net.num_classes(),
            train: extract_features(net, train_images, &layers)?,
            train_labels: train_labels.to_vec(),
            adv_train_clean: extract_features(net, clean, &layers)?,
            adv_train_adv: extract_features(net, adversarial, &layers)?,
            layers,
            attack: attack.to_string(),
            epsilon,
        })
    }

    /// Train-split penultimate features of `class`.
    pub fn class_penultimate(&self, class: usize) -> Vec<Vec<f64>> {
        self.train
            .layer(self.penultimate_pos)
            .iter()
            .zip(&self.train_labels)
            .filter(|(_, &l)| l == class)
            .map(|(f, _)| f.clone())
            .collect()
    }

    pub(crate) fn require_both_classes(&self) -> Result<()> {
        if self.adv_train_clean.is_empty() || self.adv_train_adv.is_empty() {
            return Err(Error::invalid(format!(
                "detector fitting needs clean and adversarial samples (got {} clean, {} adversarial)",
                self.adv_train_clean.len(),
                self.adv_train_adv.len()
            )));
        }
        Ok(())
    }
}
