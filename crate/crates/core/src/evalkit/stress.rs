//! Feature stress test: how far a layer's mean activation can be pushed
//! within an L∞ budget, and what that does to every other feature block.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{minimize_loss, AttackBudget, AttackKind};
use crate::error::{Error, Result};
use crate::evalkit::config::{config_err, AttackSpec, Direction, ExperimentConfig};
use crate::evalkit::experiment::Prepared;
use crate::nn::{LossSpec, MeanActivation, Mode, Network};
use crate::rng::{derive_seed, STREAM_ATTACK, STREAM_STRESS};
use crate::tensor::Tensor;

const RATIO_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub layer: usize,
    pub direction: Direction,
    pub epsilon: f64,
    /// ReLU output layers the ratios refer to.
    pub blocks: Vec<usize>,
    /// Mean over samples of `(mean(f_after) - mean(f_before)) / (|mean(f_before)| + 1e-12)`.
    pub changed_ratios: Vec<f64>,
}

impl StressReport {
    /// Ratio of the pushed layer, when it is one of the blocks.
    pub fn target_ratio(&self) -> Option<f64> {
        self.blocks.iter().position(|&b| b == self.layer).map(|p| self.changed_ratios[p])
    }
}

/// Runs BIM on `±mean(f^layer(x))` (minus sign for `Up`) and reports the
/// relative change of each ReLU block's mean activation.
pub fn stress_test(
    net: &Network,
    samples: &[Tensor],
    layer: usize,
    direction: Direction,
    budget: &AttackBudget,
) -> Result<StressReport> {
    if layer >= net.layer_count() {
        return Err(Error::invalid(format!("stress layer {layer} out of range for {} layers", net.layer_count())));
    }
    if samples.is_empty() {
        return Err(Error::invalid("stress test needs at least one sample"));
    }
    let sign = match direction {
        Direction::Down => 1.0,
        Direction::Up => -1.0,
    };
    let loss = LossSpec::default().with_extra(1.0, Arc::new(MeanActivation { layer, sign }));
    let blocks = net.activation_layers();
    let per_sample = samples
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let b = AttackBudget { seed: derive_seed(budget.seed, STREAM_ATTACK, i as u64), ..*budget };
            let x_adv = minimize_loss(AttackKind::Bim, net, x, &loss, &b)?;
            let before = net.forward(x, Mode::Eval, 0)?;
            let after = net.forward(&x_adv, Mode::Eval, 0)?;
            Ok(blocks
                .iter()
                .map(|&l| {
                    let m0 = before.activations[l].mean();
                    let m1 = after.activations[l].mean();
                    (m1 - m0) / (m0.abs() + RATIO_GUARD)
                })
                .collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_sample.len() as f64;
    let changed_ratios = (0..blocks.len()).map(|b| per_sample.iter().map(|r| r[b]).sum::<f64>() / n).collect();
    Ok(StressReport { layer, direction, epsilon: budget.epsilon, blocks, changed_ratios })
}

/// Runs the configured stress test once per epsilon on the first
/// `stress.samples` clean AdvTest images.
pub fn run_stress(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<StressReport>> {
    let sec = cfg.stress.as_ref().ok_or_else(|| config_err("stress", "the stress command needs a [stress] section"))?;
    let n = sec.samples.min(prep.split.adv_test.len());
    let samples = &prep.split.adv_test.images[..n];
    sec.epsilons
        .iter()
        .enumerate()
        .map(|(e, &eps)| {
            let budget = AttackSpec::new("bim", eps).budget(derive_seed(prep.seeds.attack, STREAM_STRESS, e as u64));
            stress_test(&prep.network, samples, sec.layer, sec.direction, &budget)
        })
        .collect()
}
