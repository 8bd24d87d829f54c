//! Kernel density in penultimate feature space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sq_dist;

/// `sum_{z' in bank} exp(-|z - z'|^2 / (2 sigma^2))`.
pub fn kernel_density(bank: &[Vec<f64>], z: &[f64], sigma: f64) -> Result<f64> {
    if bank.is_empty() {
        return Err(Error::invalid("kernel density over an empty class bank"));
    }
    let denom = 2.0 * sigma * sigma;
    Ok(bank.iter().map(|b| (-sq_dist(b, z) / denom).exp()).sum())
}

/// Adversariality: the negated density (low density means adversarial).
pub fn kd_score(bank: &[Vec<f64>], z: &[f64], sigma: f64) -> Result<f64> {
    Ok(-kernel_density(bank, z, sigma)?)
}

/// Median pairwise Euclidean distance (the lower middle value for an even
/// count), floored at 1e-12. A single-point bank yields 1.
pub fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in 0..i {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = (d.len() - 1) / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    m.max(1e-12)
}

/// Per-class banks with their bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdModel {
    pub banks: Vec<Vec<Vec<f64>>>,
    pub sigmas: Vec<f64>,
}

impl KdModel {
    pub fn fit(banks: Vec<Vec<Vec<f64>>>) -> Self {
        let sigmas = banks.iter().map(|b| median_pairwise_distance(b)).collect();
        KdModel { banks, sigmas }
    }

    pub fn score(&self, z: &[f64], predicted: usize) -> Result<f64> {
        let bank =
            self.banks.get(predicted).ok_or_else(|| Error::invalid(format!("no KD bank for class {predicted}")))?;
        kd_score(bank, z, self.sigmas[predicted])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_density_is_one() {
        assert_eq!(kernel_density(&[vec![1.0, 2.0]], &[1.0, 2.0], 0.7).unwrap(), 1.0);
    }

    #[test]
    fn far_point_has_no_density() {
        let d = kernel_density(&[vec![0.0]], &[1e6 * 0.5], 0.5).unwrap();
        assert!(d < 1e-300);
    }

    #[test]
    fn empty_bank_errors() {
        assert!(kd_score(&[], &[0.0], 1.0).is_err());
    }

    #[test]
    fn median_of_three_points() {
        // Distances 1, 2, 3.
        let p = vec![vec![0.0], vec![1.0], vec![3.0]];
        assert_eq!(median_pairwise_distance(&p), 2.0);
    }
}
