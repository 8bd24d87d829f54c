//! Per-layer Mahalanobis distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_ridge, factor_with_fallback, mean_and_covariance, ridge_for, Cholesky};

/// Gaussian statistics of one layer: one mean (classless) or one per class
/// sharing a pooled within-class covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "LayerStatsDoc", try_from = "LayerStatsDoc")]
pub struct LayerStats {
    pub means: Vec<Vec<f64>>,
    /// Row-major covariance with ridge.
    pub covariance: Vec<f64>,
    factor: Cholesky,
}

#[derive(Serialize, Deserialize)]
struct LayerStatsDoc {
    means: Vec<Vec<f64>>,
    covariance: Vec<f64>,
}

impl From<LayerStats> for LayerStatsDoc {
    fn from(s: LayerStats) -> Self {
        LayerStatsDoc { means: s.means, covariance: s.covariance }
    }
}

impl TryFrom<LayerStatsDoc> for LayerStats {
    type Error = Error;

    fn try_from(doc: LayerStatsDoc) -> Result<Self> {
        LayerStats::from_parts(doc.means, doc.covariance)
    }
}

impl LayerStats {
    pub fn from_parts(means: Vec<Vec<f64>>, covariance: Vec<f64>) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        if dim == 0 || covariance.len() != dim * dim || means.iter().any(|m| m.len() != dim) {
            return Err(Error::Shape("Mahalanobis statistics have inconsistent dimensions".into()));
        }
        let factor = Cholesky::factor(&covariance, dim)?;
        Ok(LayerStats { means, covariance, factor })
    }

    /// Classless statistics: sample mean and covariance plus ridge.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("Mahalanobis statistics need at least one row"));
        }
        let dim = rows[0].len();
        let (mean, mut cov) = mean_and_covariance(rows);
        let ridge = ridge_for(&cov, dim);
        add_ridge(&mut cov, dim, ridge);
        let factor = factor_with_fallback(&mut cov, dim, ridge)?;
        Ok(LayerStats { means: vec![mean], covariance: cov, factor })
    }

    /// Class-conditional means with a tied (pooled within-class) covariance.
    pub fn fit_class_conditional(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("Mahalanobis statistics need at least one row"));
        }
        let dim = rows[0].len();
        let mut means = Vec::with_capacity(classes);
        let mut centred = Vec::with_capacity(rows.len());
        for c in 0..classes {
            let members: Vec<Vec<f64>> =
                rows.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r.clone()).collect();
            if members.is_empty() {
                return Err(Error::invalid(format!("no clean features for class {c}")));
            }
            let (mean, _) = mean_and_covariance(&members);
            centred.extend(members.iter().map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect::<Vec<f64>>()));
            means.push(mean);
        }
        let (_, mut cov) = mean_and_covariance(&centred);
        // The centred rows have zero mean, so this is the pooled scatter.
        let ridge = ridge_for(&cov, dim);
        add_ridge(&mut cov, dim, ridge);
        let factor = factor_with_fallback(&mut cov, dim, ridge)?;
        Ok(LayerStats { means, covariance: cov, factor })
    }

    /// Smallest `(f - mu)^T Sigma^{-1} (f - mu)` over the stored means.
    pub fn score(&self, f: &[f64]) -> Result<f64> {
        if f.len() != self.factor.dim() {
            return Err(Error::Shape(format!(
                "feature of length {} for {}-dimensional statistics",
                f.len(),
                self.factor.dim()
            )));
        }
        Ok(self
            .means
            .iter()
            .map(|mu| {
                let diff: Vec<f64> = f.iter().zip(mu).map(|(a, b)| a - b).collect();
                self.factor.quad_form(&diff)
            })
            .fold(f64::INFINITY, f64::min))
    }
}

/// `(f - mu)^T Sigma^{-1} (f - mu)` for explicit statistics.
pub fn maha_score(stats: &LayerStats, f: &[f64]) -> Result<f64> {
    stats.score(f)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MahaModel {
    pub class_conditional: bool,
    pub layers: Vec<LayerStats>,
}

impl MahaModel {
    pub fn layer_scores(&self, feats: &[&[f64]]) -> Result<Vec<f64>> {
        self.layers.iter().zip(feats).map(|(s, f)| s.score(f)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_examples() {
        let s = LayerStats::from_parts(vec![vec![1.0, 1.0]], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(s.score(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((s.score(&[4.0, 5.0]).unwrap() - 25.0).abs() < 1e-12);
    }
}
