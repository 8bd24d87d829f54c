//! Bayesian uncertainty from stochastic masking of penultimate units.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::{stream_rng, STREAM_BU};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuModel {
    pub passes: usize,
    pub rate: f64,
}

impl Default for BuModel {
    fn default() -> Self {
        BuModel { passes: 50, rate: 0.3 }
    }
}

impl BuModel {
    /// Uncertainty of the logits over `passes` masked copies of `z`.
    ///
    /// Each pass zeroes exactly `floor(rate * width)` units drawn without
    /// replacement and scales the survivors by `1 / (1 - rate)`. The score is
    /// `mean |l_n|^2 - |mean l_n|^2`; higher means more adversarial.
    pub fn score(&self, net: &Network, z: &[f64], seed: u64) -> Result<f64> {
        if self.passes == 0 || !(0.0..1.0).contains(&self.rate) {
            return Err(Error::invalid(format!(
                "BU needs passes >= 1 and rate in [0,1), got {} and {}",
                self.passes, self.rate
            )));
        }
        let width = z.len();
        let dropped = ((self.rate * width as f64) + 1e-9).floor() as usize;
        if dropped == 0 {
            return Ok(0.0);
        }
        let keep_scale = 1.0 / (1.0 - self.rate);
        let mut rng = stream_rng(seed, STREAM_BU, 0);
        let logits: Vec<Vec<f64>> = (0..self.passes)
            .map(|_| {
                let mut masked: Vec<f64> = z.iter().map(|v| v * keep_scale).collect();
                for i in sample(&mut rng, width, dropped) {
                    masked[i] = 0.0;
                }
                net.logits_from_penultimate(&masked)
            })
            .collect();
        if logits.iter().all(|l| l == &logits[0]) {
            return Ok(0.0);
        }
        let n = logits.len() as f64;
        let k = logits[0].len();
        let mean: Vec<f64> = (0..k).map(|j| logits.iter().map(|l| l[j]).sum::<f64>() / n).collect();
        let second: f64 = logits.iter().map(|l| l.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / n;
        Ok(second - mean.iter().map(|v| v * v).sum::<f64>())
    }
}
