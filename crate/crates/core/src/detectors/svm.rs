//! Soft-margin RBF support vector machine solved by SMO.

use serde::{Deserialize, Serialize};

use crate::detectors::kd::median_pairwise_distance;
use crate::error::{Error, Result};
use crate::tensor::sq_dist;

pub const KKT_TOL: f64 = 1e-3;
const TAU: f64 = 1e-12;

/// `f(x) = sum_i coef_i K(sv_i, x) - rho`, positive for the adversarial class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub gamma: f64,
    pub support: Vec<Vec<f64>>,
    /// `alpha_i * y_i` of each support vector.
    pub coef: Vec<f64>,
    pub rho: f64,
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support.iter().zip(&self.coef).map(|(s, c)| c * (-self.gamma * sq_dist(s, x)).exp()).sum::<f64>()
            - self.rho
    }
}

/// `gamma = 1 / (2 * median^2)` over pairwise distances of `rows`.
pub fn median_gamma(rows: &[Vec<f64>]) -> f64 {
    let m = median_pairwise_distance(rows);
    1.0 / (2.0 * m * m)
}

/// Solves the dual with maximal-violating-pair working sets until the KKT
/// gap falls below [`KKT_TOL`]. `labels[i] = true` marks adversarial rows.
pub fn fit_rbf_svm(rows: &[Vec<f64>], labels: &[bool], c: f64, gamma: f64) -> Result<SvmModel> {
    let n = rows.len();
    if n != labels.len() || n == 0 {
        return Err(Error::invalid("SVM needs matching, non-empty rows and labels"));
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(Error::invalid("SVM needs both classes"));
    }
    if !(c > 0.0 && gamma > 0.0) {
        return Err(Error::invalid(format!("SVM needs C > 0 and gamma > 0, got {c} and {gamma}")));
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let k: Vec<f64> = (0..n * n).map(|idx| (-gamma * sq_dist(&rows[idx / n], &rows[idx % n])).exp()).collect();
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    let mut alpha = vec![0.0; n];
    // Gradient of 0.5 a^T Q a - e^T a.
    let mut grad = vec![-1.0; n];
    let max_iter = (100 * n).max(100_000);
    let in_up = |a: f64, yi: f64| (yi > 0.0 && a < c) || (yi < 0.0 && a > 0.0);
    let in_low = |a: f64, yi: f64| (yi > 0.0 && a > 0.0) || (yi < 0.0 && a < c);
    let mut gap = f64::INFINITY;
    for _ in 0..max_iter {
        let mut i = usize::MAX;
        let mut g_max = f64::NEG_INFINITY;
        for t in 0..n {
            if in_up(alpha[t], y[t]) && -y[t] * grad[t] > g_max {
                g_max = -y[t] * grad[t];
                i = t;
            }
        }
        let mut j = usize::MAX;
        let mut g_min = f64::INFINITY;
        for t in 0..n {
            if in_low(alpha[t], y[t]) && -y[t] * grad[t] < g_min {
                g_min = -y[t] * grad[t];
                j = t;
            }
        }
        gap = g_max - g_min;
        if i == usize::MAX || j == usize::MAX || gap < KKT_TOL {
            return Ok(build_model(rows, &y, &alpha, &grad, c, gamma));
        }
        // Two-variable subproblem along (y_i, -y_j), as in LIBSVM.
        let (ai_old, aj_old) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - ai_old, alpha[j] - aj_old);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }
    Err(Error::Numerical(format!(
        "SMO did not reach KKT tolerance {KKT_TOL} within {max_iter} iterations (gap {gap:.3e})"
    )))
}

fn build_model(rows: &[Vec<f64>], y: &[f64], alpha: &[f64], grad: &[f64], c: f64, gamma: f64) -> SvmModel {
    // rho from free vectors, or the midpoint of the feasible interval.
    let mut free_sum = 0.0;
    let mut free = 0usize;
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..y.len() {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            free_sum += yg;
            free += 1;
        } else if (alpha[t] >= c && y[t] < 0.0) || (alpha[t] <= 0.0 && y[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { (ub + lb) / 2.0 };
    let (support, coef) = (0..y.len()).filter(|&t| alpha[t] > 0.0).map(|t| (rows[t].clone(), alpha[t] * y[t])).unzip();
    SvmModel { gamma, support, coef, rho }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair_splits_at_midpoint() {
        let rows = vec![vec![-1.0], vec![1.0]];
        let m = fit_rbf_svm(&rows, &[false, true], 1.0, 0.5).unwrap();
        assert!(m.decision(&[0.0]).abs() < 1e-9);
        assert!(m.decision(&[1.0]) > 0.0 && m.decision(&[-1.0]) < 0.0);
    }
}
