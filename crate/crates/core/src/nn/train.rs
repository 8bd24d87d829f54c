//! Mini-batch gradient descent with momentum.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::layer::{LayerSpec, Params};
use crate::nn::loss::LossSpec;
use crate::nn::network::{Mode, Network};
use crate::rng::{derive_seed, stream_rng, STREAM_DROPOUT, STREAM_SHUFFLE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Optimize on inputs standardized by the training-set pixel mean and
    /// standard deviation; the transform is folded into the first layer
    /// afterwards, so the returned network still consumes raw `[0, 1]` pixels.
    #[serde(default)]
    pub standardize: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            standardize: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains a copy of `net` on `data` with cross-entropy.
pub fn train_classifier(net: &Network, data: &LabeledSet, cfg: &TrainConfig) -> Result<(Network, TrainHistory)> {
    train_samples(net, &data.images, &data.labels, cfg)
}

/// [`train_classifier`] on arbitrary real-valued inputs.
pub fn train_samples(
    net: &Network,
    inputs: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    if inputs.len() != labels.len() {
        return Err(Error::invalid(format!("{} inputs but {} labels", inputs.len(), labels.len())));
    }
    if inputs.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::invalid("batch_size and learning_rate must be positive"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= net.num_classes()) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", net.num_classes())));
    }
    if cfg.epochs == 0 {
        return Ok((net.clone(), TrainHistory::default()));
    }
    if cfg.standardize {
        let (mean, std) = pixel_stats(inputs);
        let mut inner = net.clone();
        rescale_first_layer(&mut inner, mean, std, true)?;
        let scaled: Vec<Tensor> = inputs.iter().map(|x| x.map(|v| (v - mean) / std)).collect();
        let (mut trained, history) = run_sgd(inner, &scaled, labels, cfg)?;
        rescale_first_layer(&mut trained, mean, std, false)?;
        return Ok((trained, history));
    }
    run_sgd(net.clone(), inputs, labels, cfg)
}

/// Mean and standard deviation over every pixel of every image (the
/// deviation is floored so constant data stays usable).
fn pixel_stats(images: &[Tensor]) -> (f64, f64) {
    let n: usize = images.iter().map(Tensor::len).sum();
    let mean = images.iter().flat_map(|x| x.data()).sum::<f64>() / n as f64;
    let var = images.iter().flat_map(|x| x.data()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt().max(1e-6))
}

/// Re-expresses the first layer (after any leading flatten) for inputs
/// `(x - mean) / std` (`to_standardized`) or back for raw inputs. The
/// network function is unchanged up to rounding.
fn rescale_first_layer(net: &mut Network, mean: f64, std: f64, to_standardized: bool) -> Result<()> {
    let first = net
        .layers()
        .iter()
        .position(|l| !matches!(l, LayerSpec::Flatten))
        .ok_or_else(|| Error::invalid("standardized training needs a layer with parameters"))?;
    match net.layers()[first] {
        LayerSpec::Affine { .. } | LayerSpec::Conv2d { padding: 0, .. } => {}
        other => {
            return Err(Error::invalid(format!(
                "standardized training needs an affine or unpadded conv2d first layer, found {}",
                other.name()
            )))
        }
    }
    let p = net.params_mut()[first].as_mut().expect("first layer has parameters");
    let outputs = p.bias.len();
    let fan_in = p.weight.len() / outputs;
    let (w, b) = (p.weight.data_mut(), p.bias.data_mut());
    for o in 0..outputs {
        let row = &mut w[o * fan_in..(o + 1) * fan_in];
        if to_standardized {
            b[o] += mean * row.iter().sum::<f64>();
            row.iter_mut().for_each(|v| *v *= std);
        } else {
            row.iter_mut().for_each(|v| *v /= std);
            b[o] -= mean * row.iter().sum::<f64>();
        }
    }
    Ok(())
}

fn run_sgd(
    mut net: Network,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    let mut velocity: Vec<Option<Params>> = net.params().iter().map(|p| p.as_ref().map(Params::zeros_like)).collect();
    let mut history = TrainHistory::default();
    let n = images.len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, STREAM_SHUFFLE, epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Vec<Option<Params>>)>> = batch
                .par_iter()
                .map(|&i| {
                    let seed = derive_seed(cfg.seed, STREAM_DROPOUT, (epoch * n + i) as u64);
                    let ev =
                        net.evaluate_loss(&images[i], &LossSpec::cross_entropy(labels[i]), Mode::Train, seed, true)?;
                    Ok((ev.value, ev.param_grads.expect("requested")))
                })
                .collect();
            let mut grad_sum: Vec<Option<Params>> =
                net.params().iter().map(|p| p.as_ref().map(Params::zeros_like)).collect();
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                for (acc, g) in grad_sum.iter_mut().zip(&grads) {
                    if let (Some(acc), Some(g)) = (acc.as_mut(), g.as_ref()) {
                        acc.add_scaled(g, 1.0);
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((p, v), g) in net.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad_sum) {
                let (Some(p), Some(v), Some(g)) = (p.as_mut(), v.as_mut(), g.as_ref()) else {
                    continue;
                };
                for ((pw, vw), gw) in p.weight.data_mut().iter_mut().zip(v.weight.data_mut()).zip(g.weight.data()) {
                    *vw = cfg.momentum * *vw + scale * gw + cfg.weight_decay * *pw;
                    *pw -= cfg.learning_rate * *vw;
                }
                for ((pb, vb), gb) in p.bias.data_mut().iter_mut().zip(v.bias.data_mut()).zip(g.bias.data()) {
                    *vb = cfg.momentum * *vb + scale * gb;
                    *pb -= cfg.learning_rate * *vb;
                }
            }
        }
        let mean = epoch_loss / n as f64;
        if !mean.is_finite() {
            return Err(Error::Numerical(format!("training diverged at epoch {epoch} (loss {mean})")));
        }
        history.epoch_loss.push(mean);
    }
    Ok((net, history))
}

/// Fraction of samples the network classifies correctly.
pub fn accuracy(net: &Network, data: &LabeledSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let correct: Result<Vec<bool>> =
        data.images.par_iter().zip(&data.labels).map(|(x, &y)| Ok(net.predict(x)? == y)).collect();
    Ok(correct?.into_iter().filter(|&c| c).count() as f64 / data.len() as f64)
}
