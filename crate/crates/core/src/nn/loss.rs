//! Composite attack/training losses.
//!
//! A [`LossSpec`] is an optional classification base term plus a weighted sum
//! of extra terms. Extras read the forward trace and hand back gradients with
//! respect to the layer activations they touch; the network routes those
//! through the backward pass.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::network::ForwardTrace;
use crate::tensor::Tensor;

/// Classification loss toward a target class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseLoss {
    /// `-ln p_target`.
    CrossEntropy { target: usize },
    /// `max(max_{k != target} l_k - l_target, -kappa)`, minimized to push the
    /// target logit above every other logit by at least `kappa`.
    CwMargin { target: usize, kappa: f64 },
}

impl BaseLoss {
    pub fn target(&self) -> usize {
        match *self {
            BaseLoss::CrossEntropy { target } | BaseLoss::CwMargin { target, .. } => target,
        }
    }
}

/// Value of an extra term and its gradient with respect to layer activations.
#[derive(Debug, Clone)]
pub struct TermGradient {
    pub value: f64,
    /// `(layer index, d value / d activation)` pairs.
    pub activation_grads: Vec<(usize, Tensor)>,
}

/// A differentiable function of the forward trace.
pub trait TraceLoss: Send + Sync + Debug {
    fn evaluate(&self, trace: &ForwardTrace) -> Result<TermGradient>;

    /// Short label used in reports.
    fn label(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct WeightedTerm {
    pub weight: f64,
    pub term: Arc<dyn TraceLoss>,
}

/// Base classification loss plus weighted extras.
#[derive(Debug, Clone, Default)]
pub struct LossSpec {
    pub base: Option<BaseLoss>,
    pub extras: Vec<WeightedTerm>,
}

impl LossSpec {
    pub fn cross_entropy(target: usize) -> Self {
        LossSpec { base: Some(BaseLoss::CrossEntropy { target }), extras: Vec::new() }
    }

    pub fn cw_margin(target: usize, kappa: f64) -> Self {
        LossSpec { base: Some(BaseLoss::CwMargin { target, kappa }), extras: Vec::new() }
    }

    pub fn with_extra(mut self, weight: f64, term: Arc<dyn TraceLoss>) -> Self {
        self.extras.push(WeightedTerm { weight, term });
        self
    }

    pub fn with_extras(mut self, extras: impl IntoIterator<Item = WeightedTerm>) -> Self {
        self.extras.extend(extras);
        self
    }
}

/// `sign * mean(activation of layer)`: the stress-test objective.
///
/// `sign = +1` drives the layer's mean activation down when minimized,
/// `sign = -1` drives it up.
#[derive(Debug, Clone, Copy)]
pub struct MeanActivation {
    pub layer: usize,
    pub sign: f64,
}

impl TraceLoss for MeanActivation {
    fn evaluate(&self, trace: &ForwardTrace) -> Result<TermGradient> {
        let act = trace.activation(self.layer)?;
        let n = act.len() as f64;
        Ok(TermGradient {
            value: self.sign * act.mean(),
            activation_grads: vec![(self.layer, Tensor::filled(act.shape(), self.sign / n))],
        })
    }

    fn label(&self) -> String {
        format!("mean_activation[{}]x{}", self.layer, self.sign)
    }
}

/// Numerically stable `ln Σ exp(l_k)`.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Largest logit among classes other than `target` (lowest index on ties).
pub fn runner_up(logits: &[f64], target: usize) -> usize {
    let mut best: Option<usize> = None;
    for (k, &l) in logits.iter().enumerate() {
        if k == target {
            continue;
        }
        match best {
            Some(b) if logits[b] >= l => {}
            _ => best = Some(k),
        }
    }
    best.expect("at least two classes")
}

pub(crate) fn check_target(target: usize, classes: usize) -> Result<()> {
    if target >= classes {
        return Err(Error::invalid(format!("target class {target} out of range for {classes} classes")));
    }
    Ok(())
}
