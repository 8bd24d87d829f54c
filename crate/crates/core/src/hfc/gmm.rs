//! Full-covariance Gaussian mixtures fitted by EM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_ridge, factor_with_fallback, mean_and_covariance, ridge_for, Cholesky};
use crate::nn::log_sum_exp;
use crate::rng::{stream_rng, STREAM_GMM};
use crate::tensor::sq_dist;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// EM settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmConfig {
    pub components: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement falls below this.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_iters() -> usize {
    200
}

fn default_tol() -> f64 {
    1e-6
}

impl EmConfig {
    pub fn new(components: usize, seed: u64) -> Self {
        EmConfig { components, max_iters: default_max_iters(), tol: default_tol(), seed }
    }
}

/// Log-likelihood trace of one EM run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmReport {
    /// Total log-likelihood before each M-step, then after the last one.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// A Gaussian mixture over the channel-mean features of one layer.
#[derive(Debug, Clone)]
pub struct GmmLayerModel {
    pub layer: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `dim x dim` covariances, ridge included.
    pub covariances: Vec<Vec<f64>>,
    factors: Vec<Cholesky>,
}

impl GmmLayerModel {
    /// Builds a model from explicit parameters, factoring every covariance.
    /// Fails when a covariance is not symmetric positive-definite.
    pub fn from_parts(
        layer: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = weights.len();
        if m == 0 || means.len() != m || covariances.len() != m {
            return Err(Error::invalid(format!(
                "GMM needs matching non-empty weights/means/covariances, got {}/{}/{}",
                m,
                means.len(),
                covariances.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("GMM dimension must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("GMM weights must be non-negative and sum to 1 (sum {total})")));
        }
        let mut factors = Vec::with_capacity(m);
        for (k, (mu, cov)) in means.iter().zip(&covariances).enumerate() {
            if mu.len() != dim || cov.len() != dim * dim {
                return Err(Error::Shape(format!("GMM component {k} has inconsistent dimensions")));
            }
            for i in 0..dim {
                for j in 0..i {
                    let (a, b) = (cov[i * dim + j], cov[j * dim + i]);
                    if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                        return Err(Error::Numerical(format!("covariance {k} is not symmetric")));
                    }
                }
            }
            factors.push(
                Cholesky::factor(cov, dim)
                    .map_err(|e| Error::Numerical(format!("covariance {k} of layer {layer}: {e}")))?,
            );
        }
        Ok(GmmLayerModel { layer, dim, weights, means, covariances, factors })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn factor(&self, m: usize) -> &Cholesky {
        &self.factors[m]
    }

    /// `(f - mu_m)^T Sigma_m^{-1} (f - mu_m)`.
    pub fn mahalanobis(&self, m: usize, f: &[f64]) -> f64 {
        let diff: Vec<f64> = f.iter().zip(&self.means[m]).map(|(a, b)| a - b).collect();
        self.factors[m].quad_form(&diff)
    }

    /// `ln pi_m - ln det Sigma_m / 2 - mahalanobis / 2`, the selection score.
    pub fn component_score(&self, m: usize, f: &[f64]) -> f64 {
        self.weights[m].ln() - 0.5 * self.factors[m].log_det() - 0.5 * self.mahalanobis(m, f)
    }

    /// Most probable component for `f`; lowest index on ties.
    pub fn select_component(&self, f: &[f64]) -> Result<usize> {
        self.check_dim(f)?;
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for m in 0..self.components() {
            let s = self.component_score(m, f);
            if s > best_score {
                best = m;
                best_score = s;
            }
        }
        Ok(best)
    }

    /// Log-density of `f` under the mixture.
    pub fn log_density(&self, f: &[f64]) -> Result<f64> {
        self.check_dim(f)?;
        let terms: Vec<f64> =
            (0..self.components()).map(|m| self.component_score(m, f) - 0.5 * self.dim as f64 * LN_2PI).collect();
        Ok(log_sum_exp(&terms))
    }

    fn check_dim(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature of length {} for a {}-dimensional GMM (layer {})",
                f.len(),
                self.dim,
                self.layer
            )));
        }
        Ok(())
    }
}

/// Per-component sufficient statistics of the M-step.
struct MStep {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Responsibility-weighted scatter about the new mean, divided by `N_k`.
    scatter: Vec<Vec<f64>>,
    counts: Vec<f64>,
}

fn m_step(x: &[Vec<f64>], resp: &[Vec<f64>], dim: usize) -> MStep {
    let m = resp[0].len();
    let n = x.len() as f64;
    let mut counts = vec![0.0; m];
    let mut means = vec![vec![0.0; dim]; m];
    for (xi, ri) in x.iter().zip(resp) {
        for k in 0..m {
            counts[k] += ri[k];
            for d in 0..dim {
                means[k][d] += ri[k] * xi[d];
            }
        }
    }
    let mut scatter = vec![vec![0.0; dim * dim]; m];
    for k in 0..m {
        if counts[k] > 0.0 {
            means[k].iter_mut().for_each(|v| *v /= counts[k]);
        }
    }
    for (xi, ri) in x.iter().zip(resp) {
        for k in 0..m {
            if ri[k] == 0.0 {
                continue;
            }
            let diff: Vec<f64> = xi.iter().zip(&means[k]).map(|(a, b)| a - b).collect();
            for a in 0..dim {
                for b in 0..=a {
                    scatter[k][a * dim + b] += ri[k] * diff[a] * diff[b];
                }
            }
        }
    }
    for k in 0..m {
        let s = &mut scatter[k];
        for a in 0..dim {
            for b in 0..=a {
                let v = if counts[k] > 0.0 { s[a * dim + b] / counts[k] } else { 0.0 };
                s[a * dim + b] = v;
                s[b * dim + a] = v;
            }
        }
    }
    MStep { weights: counts.iter().map(|c| c / n).collect(), means, scatter, counts }
}

/// `ln det Sigma + tr(Sigma^{-1} S)`: the covariance part of the negated
/// expected complete-data log-likelihood (per unit responsibility).
fn covariance_objective(chol: &Cholesky, scatter: &[f64]) -> f64 {
    let inv = chol.inverse();
    chol.log_det() + inv.iter().zip(scatter).map(|(a, b)| a * b).sum::<f64>()
}

/// Responsibilities and total log-likelihood under `model`.
fn e_step(model: &GmmLayerModel, x: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let mut total = 0.0;
    let resp = x
        .iter()
        .map(|xi| {
            let logs: Vec<f64> = (0..model.components())
                .map(|m| model.component_score(m, xi) - 0.5 * model.dim as f64 * LN_2PI)
                .collect();
            let lse = log_sum_exp(&logs);
            total += lse;
            logs.iter().map(|l| (l - lse).exp()).collect()
        })
        .collect();
    (resp, total)
}

/// k-means++ seeding: indices of `m` distinct-by-draw centres.
fn kmeans_pp(x: &[Vec<f64>], m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut centres = vec![rng.gen_range(0..x.len())];
    let mut d2: Vec<f64> = x.iter().map(|xi| sq_dist(xi, &x[centres[0]])).collect();
    while centres.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = x.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.gen_range(0..x.len())
        };
        centres.push(next);
        for (d, xi) in d2.iter_mut().zip(x) {
            *d = d.min(sq_dist(xi, &x[next]));
        }
    }
    centres
}

/// Fits an `M`-component GMM to `features` with EM from a k-means++ hard
/// assignment.
///
/// Every covariance carries `ridge * I` with `ridge = 1e-4 * mean diagonal
/// variance` of the pooled data (floored at `1e-10`). Means and weights take
/// their exact M-step values; a ridged covariance update is accepted only when
/// it does not lower the expected complete-data log-likelihood, so the total
/// log-likelihood never decreases.
pub fn fit_gmm_em(features: &[Vec<f64>], layer: usize, cfg: &EmConfig) -> Result<(GmmLayerModel, EmReport)> {
    let m = cfg.components;
    if m == 0 {
        return Err(Error::invalid("GMM needs at least one component"));
    }
    if features.len() < m {
        return Err(Error::invalid(format!(
            "{} feature vectors cannot support {m} GMM components; use a smaller M",
            features.len()
        )));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::Shape("GMM features must share a positive dimension".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite GMM feature".into()));
    }
    let (_, pooled) = mean_and_covariance(features);
    let ridge = ridge_for(&pooled, dim);

    let mut rng = stream_rng(cfg.seed, STREAM_GMM, layer as u64);
    let centres = kmeans_pp(features, m, &mut rng);
    let hard: Vec<Vec<f64>> = features
        .iter()
        .map(|xi| {
            let mut best = 0;
            for k in 1..m {
                if sq_dist(xi, &features[centres[k]]) < sq_dist(xi, &features[centres[best]]) {
                    best = k;
                }
            }
            (0..m).map(|k| if k == best { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    let init = m_step(features, &hard, dim);
    let mut covs = Vec::with_capacity(m);
    let mut means = init.means;
    for k in 0..m {
        // A centre shared by a duplicate point can end up empty.
        if init.counts[k] == 0.0 {
            means[k] = features[centres[k]].clone();
            covs.push(pooled.clone());
        } else {
            covs.push(init.scatter[k].clone());
        }
    }
    let mut factors = Vec::with_capacity(m);
    for cov in &mut covs {
        add_ridge(cov, dim, ridge);
        factors.push(factor_with_fallback(cov, dim, ridge)?);
    }
    let mut model = GmmLayerModel { layer, dim, weights: init.weights, means, covariances: covs, factors };

    let mut report = EmReport::default();
    let (mut resp, mut ll) = e_step(&model, features);
    report.log_likelihood.push(ll);
    for _ in 0..cfg.max_iters {
        let step = m_step(features, &resp, dim);
        for k in 0..m {
            if step.counts[k] == 0.0 {
                continue;
            }
            let mut candidate = step.scatter[k].clone();
            add_ridge(&mut candidate, dim, ridge);
            let chol = factor_with_fallback(&mut candidate, dim, ridge)?;
            let keep_old = covariance_objective(&model.factors[k], &step.scatter[k])
                < covariance_objective(&chol, &step.scatter[k]);
            if !keep_old {
                model.covariances[k] = candidate;
                model.factors[k] = chol;
            }
            model.means[k] = step.means[k].clone();
        }
        model.weights = step.weights;
        report.iterations += 1;
        let (next_resp, next_ll) = e_step(&model, features);
        report.log_likelihood.push(next_ll);
        let improvement = next_ll - ll;
        resp = next_resp;
        ll = next_ll;
        if improvement.abs() < cfg.tol * ll.abs().max(1e-300) {
            report.converged = true;
            break;
        }
    }
    if !ll.is_finite() {
        return Err(Error::Numerical(format!("GMM log-likelihood for layer {layer} is not finite")));
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_is_closed_form() {
        let x = vec![vec![1.0, 2.0], vec![3.0, 0.0], vec![2.0, 4.0], vec![0.0, 1.0]];
        let (g, _) = fit_gmm_em(&x, 0, &EmConfig::new(1, 3)).unwrap();
        let (mean, mut cov) = mean_and_covariance(&x);
        let ridge = ridge_for(&cov, 2);
        crate::linalg::add_ridge(&mut cov, 2, ridge);
        assert_eq!(g.weights, vec![1.0]);
        for (a, b) in g.means[0].iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.covariances[0].iter().zip(&cov) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_vectors_give_ridge_identity() {
        let x = vec![vec![0.5, -1.0, 2.0]; 6];
        let (g, report) = fit_gmm_em(&x, 0, &EmConfig::new(1, 0)).unwrap();
        let r = crate::linalg::RIDGE_FLOOR;
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.covariances[0][i * 3 + j], if i == j { r } else { 0.0 });
            }
        }
        assert!(report.log_likelihood.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn too_few_vectors() {
        let err = fit_gmm_em(&[vec![1.0]], 0, &EmConfig::new(2, 0)).unwrap_err().to_string();
        assert!(err.contains("smaller M"), "{err}");
    }

    #[test]
    fn tie_picks_lowest_index() {
        let g = GmmLayerModel::from_parts(0, vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], vec![vec![1.0], vec![1.0]])
            .unwrap();
        assert_eq!(g.select_component(&[0.0]).unwrap(), 0);
        assert_eq!(g.select_component(&[1.0]).unwrap(), 1);
    }
}
