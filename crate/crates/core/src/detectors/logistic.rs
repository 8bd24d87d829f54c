//! L2-regularized logistic regression used to combine per-layer scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_L2: f64 = 1e-3;
const MAX_STEPS: usize = 10_000;
const GRAD_TOL: f64 = 1e-6;

/// Weights in the raw score space: `sigmoid(w . s + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    pub fn logit(&self, s: &[f64]) -> f64 {
        self.weights.iter().zip(s).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn probability(&self, s: &[f64]) -> f64 {
        sigmoid(self.logit(s))
    }
}

/// Fits `label = 1` (adversarial) against `label = 0` (clean).
///
/// Features are standardized internally, the L2 penalty `l2 * |w|^2 / 2` acts
/// on the standardized weights, and plain gradient descent runs until the
/// gradient norm drops below 1e-6 or 10 000 steps pass. The returned weights
/// are folded back into the raw feature space.
pub fn fit_logistic(rows: &[Vec<f64>], labels: &[bool], l2: f64) -> Result<Logistic> {
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(Error::invalid("logistic regression needs matching, non-empty rows and labels"));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::invalid("logistic regression needs both classes"));
    }
    let d = rows[0].len();
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite detector score in combiner input".into()));
    }
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
    let x: Vec<Vec<f64>> = rows.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) / scale[j]).collect()).collect();
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(u8::from(l))).collect();
    // Lipschitz bound of the gradient for standardized inputs.
    let step = 1.0 / (0.25 * (d as f64 + 1.0) + l2);
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..MAX_STEPS {
        let mut gw: Vec<f64> = w.iter().map(|wj| l2 * wj).collect();
        let mut gb = 0.0;
        for (xi, yi) in x.iter().zip(&y) {
            let z: f64 = w.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + b;
            let r = (sigmoid(z) - yi) / n;
            for (g, v) in gw.iter_mut().zip(xi) {
                *g += r * v;
            }
            gb += r;
        }
        let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if norm < GRAD_TOL {
            break;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= step * g;
        }
        b -= step * gb;
    }
    let weights: Vec<f64> = w.iter().zip(&scale).map(|(wj, s)| wj / s).collect();
    let bias = b - weights.iter().zip(&mean).map(|(wj, m)| wj * m).sum::<f64>();
    Ok(Logistic { weights, bias })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_scores() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let labels: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let m = fit_logistic(&rows, &labels, DEFAULT_L2).unwrap();
        let acc = rows.iter().zip(&labels).filter(|(r, &l)| (m.probability(r) > 0.5) == l).count();
        assert_eq!(acc, 20);
    }

    #[test]
    fn duplicates_share_weights() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 7) as f64, (i % 7) as f64, (i % 3) as f64]).collect();
        let labels: Vec<bool> = (0..30).map(|i| i % 7 > 3).collect();
        let m = fit_logistic(&rows, &labels, DEFAULT_L2).unwrap();
        assert!((m.weights[0] - m.weights[1]).abs() < 1e-6);
    }

    #[test]
    fn single_class_rejected() {
        assert!(fit_logistic(&[vec![1.0], vec![2.0]], &[true, true], DEFAULT_L2).is_err());
    }
}
