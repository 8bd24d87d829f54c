//! Local intrinsic dimensionality against a fixed reference set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::sq_dist;

/// Cap applied when every neighbour sits at the same distance.
pub const LID_CAP: f64 = 1e6;

/// Maximum-likelihood LID from sorted neighbour distances `r_1 <= ... <= r_k`.
///
/// Zero distances are dropped (and `k` reduced). No positive distance gives
/// 0; a vanishing log-ratio sum gives [`LID_CAP`].
pub fn lid_from_distances(distances: &[f64]) -> f64 {
    let positive: Vec<f64> = distances.iter().copied().filter(|&d| d > 0.0).collect();
    let Some(&rk) = positive.last() else {
        return 0.0;
    };
    let k = positive.len() as f64;
    let s: f64 = positive.iter().map(|r| (r / rk).ln()).sum::<f64>() / k;
    if s == 0.0 {
        return LID_CAP;
    }
    (-1.0 / s).min(LID_CAP)
}

/// LID of `f` using its `k` nearest rows of `reference`.
pub fn lid_score(reference: &[Vec<f64>], f: &[f64], k: usize) -> Result<f64> {
    if k == 0 || reference.len() < k {
        return Err(Error::invalid(format!(
            "LID with k = {k} needs at least k reference rows, got {}",
            reference.len()
        )));
    }
    let mut d: Vec<f64> = reference.iter().map(|r| sq_dist(r, f).sqrt()).collect();
    d.sort_unstable_by(f64::total_cmp);
    Ok(lid_from_distances(&d[..k]))
}

/// Per-layer reference sets; the combiner lives in the detector facade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidModel {
    pub k: usize,
    pub references: Vec<Vec<Vec<f64>>>,
}

impl LidModel {
    pub fn layer_scores(&self, feats: &[&[f64]]) -> Result<Vec<f64>> {
        self.references.iter().zip(feats).map(|(r, f)| lid_score(r, f, self.k.min(r.len()))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_value() {
        let want = 4.0 / (6.0 * 2f64.ln());
        assert!((lid_from_distances(&[1.0, 2.0, 4.0, 8.0]) - want).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        assert_eq!(lid_from_distances(&[0.0, 0.0]), 0.0);
        assert_eq!(lid_from_distances(&[3.0, 3.0, 3.0]), LID_CAP);
        // A zero distance is skipped: same as (1, 2, 4, 8).
        assert_eq!(lid_from_distances(&[0.0, 1.0, 2.0, 4.0, 8.0]), lid_from_distances(&[1.0, 2.0, 4.0, 8.0]));
    }
}
