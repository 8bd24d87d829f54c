//! Hierarchical feature constraint: per-layer mixtures of clean target-class
//! features, the constraint loss added to attacks, and the anomaly score
//! built on the same mixtures.

mod gmm;

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gmm::{fit_gmm_em, EmConfig, EmReport, GmmLayerModel};

use crate::attacks::AttackKind;
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::{
    channel_mean_backward, channel_mean_features, ForwardTrace, Mode, Network, TermGradient, TraceLoss, WeightedTerm,
};

pub const HFC_FORMAT_VERSION: u32 = 1;

/// How to fit an [`HfcModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HfcConfig {
    /// Mixture size; `None` picks 16 below 500 clean target samples, else 64.
    #[serde(default)]
    pub components: Option<usize>,
    /// Constrained layers; `None` means every ReLU output.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
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

impl Default for HfcConfig {
    fn default() -> Self {
        HfcConfig { components: None, layers: None, max_iters: default_max_iters(), tol: default_tol(), seed: 0 }
    }
}

/// Default mixture size for `samples` clean target-class vectors.
pub fn default_components(samples: usize) -> usize {
    if samples < 500 {
        16
    } else {
        64
    }
}

/// Fitted constraint for one target class.
#[derive(Debug, Clone)]
pub struct HfcModel {
    pub target: usize,
    /// One mixture per constrained layer, in increasing layer order.
    pub layers: Vec<GmmLayerModel>,
    /// `lambda_l = 1 / C_l` for each entry of `layers`.
    pub lambdas: Vec<f64>,
}

impl HfcModel {
    pub fn new(target: usize, mut layers: Vec<GmmLayerModel>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("HFC model needs at least one constrained layer"));
        }
        layers.sort_by_key(|g| g.layer);
        if layers.windows(2).any(|w| w[0].layer == w[1].layer) {
            return Err(Error::invalid("HFC model constrains a layer twice"));
        }
        let lambdas = layers.iter().map(|g| 1.0 / g.dim as f64).collect();
        Ok(HfcModel { target, layers, lambdas })
    }

    pub fn last_layer(&self) -> &GmmLayerModel {
        self.layers.last().expect("non-empty by construction")
    }
}

/// Fits per-layer mixtures on the `target`-class images of `train`.
pub fn fit_hfc(net: &Network, train: &LabeledSet, target: usize, cfg: &HfcConfig) -> Result<(HfcModel, Vec<EmReport>)> {
    let idx = train.indices_of(target);
    if idx.is_empty() {
        return Err(Error::invalid(format!("no training images of target class {target}")));
    }
    let layers = match &cfg.layers {
        Some(l) => l.clone(),
        None => net.activation_layers(),
    };
    if layers.is_empty() {
        return Err(Error::invalid("network has no layer to constrain"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l + 1 >= net.layer_count()) {
        return Err(Error::invalid(format!(
            "layer {bad} cannot be constrained (network has {} layers; logits excluded)",
            net.layer_count()
        )));
    }
    let traces: Vec<ForwardTrace> =
        idx.par_iter().map(|&i| net.forward(&train.images[i], Mode::Eval, 0)).collect::<Result<_>>()?;
    let components = cfg.components.unwrap_or_else(|| default_components(idx.len()));
    let fits: Vec<(GmmLayerModel, EmReport)> = layers
        .par_iter()
        .map(|&layer| {
            let feats: Vec<Vec<f64>> =
                traces.iter().map(|t| channel_mean_features(t, layer).map(|f| f.into_data())).collect::<Result<_>>()?;
            let em = EmConfig { components, max_iters: cfg.max_iters, tol: cfg.tol, seed: cfg.seed };
            fit_gmm_em(&feats, layer, &em)
        })
        .collect::<Result<_>>()?;
    let (models, reports): (Vec<_>, Vec<_>) = fits.into_iter().unzip();
    Ok((HfcModel::new(target, models)?, reports))
}

/// The constraint term: `sum_l (lambda_l / 2) * mahalanobis_l` with the
/// component re-selected on every evaluation.
#[derive(Debug, Clone)]
pub struct HfcTerm {
    pub model: Arc<HfcModel>,
}

impl TraceLoss for HfcTerm {
    fn evaluate(&self, trace: &ForwardTrace) -> Result<TermGradient> {
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(self.model.layers.len());
        for (gmm, &lambda) in self.model.layers.iter().zip(&self.model.lambdas) {
            let act = trace.activation(gmm.layer)?;
            let f = channel_mean_features(trace, gmm.layer)?;
            let m = gmm.select_component(f.data())?;
            let diff: Vec<f64> = f.data().iter().zip(&gmm.means[m]).map(|(a, b)| a - b).collect();
            let chol = gmm.factor(m);
            value += 0.5 * lambda * chol.quad_form(&diff);
            let g: Vec<f64> = chol.solve(&diff).into_iter().map(|v| lambda * v).collect();
            grads.push((gmm.layer, channel_mean_backward(act.shape(), &g)));
        }
        Ok(TermGradient { value, activation_grads: grads })
    }

    fn label(&self) -> String {
        format!("hfc[target={}]", self.model.target)
    }
}

/// Constraint value for one trace.
pub fn hfc_loss(model: &HfcModel, trace: &ForwardTrace) -> Result<f64> {
    Ok(HfcTerm { model: Arc::new(model.clone()) }.evaluate(trace)?.value)
}

/// The HFC extra (weight 1) for an attack toward `attack_target`.
pub fn attach_hfc(kind: AttackKind, model: Arc<HfcModel>, attack_target: usize) -> Result<Vec<WeightedTerm>> {
    kind.validate()?;
    if model.target != attack_target {
        return Err(Error::invalid(format!(
            "HFC model was fitted for class {} but the {} attack targets class {attack_target}",
            model.target,
            kind.name()
        )));
    }
    Ok(vec![WeightedTerm { weight: 1.0, term: Arc::new(HfcTerm { model }) }])
}

/// Unweighted Mahalanobis distance of the last constrained layer's feature
/// to its most probable component.
pub fn anomaly_score(model: &HfcModel, trace: &ForwardTrace) -> Result<f64> {
    let gmm = model.last_layer();
    let f = channel_mean_features(trace, gmm.layer)?;
    let m = gmm.select_component(f.data())?;
    Ok(gmm.mahalanobis(m, f.data()))
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    layer: usize,
    components: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct HfcDoc {
    format_version: u32,
    target: usize,
    layers: Vec<LayerDoc>,
}

pub fn hfc_to_json(model: &HfcModel) -> String {
    let doc = HfcDoc {
        format_version: HFC_FORMAT_VERSION,
        target: model.target,
        layers: model
            .layers
            .iter()
            .map(|g| LayerDoc {
                layer: g.layer,
                components: g.components(),
                weights: g.weights.clone(),
                means: g.means.clone(),
                covariances: g.covariances.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("HFC document serializes")
}

/// Parses a saved model, refactoring every covariance.
pub fn hfc_from_json(text: &str) -> Result<HfcModel> {
    let doc: HfcDoc = serde_json::from_str(text)?;
    if doc.format_version != HFC_FORMAT_VERSION {
        return Err(Error::FormatVersion { found: doc.format_version, expected: HFC_FORMAT_VERSION });
    }
    let layers = doc
        .layers
        .into_iter()
        .map(|l| {
            if l.components != l.weights.len() {
                return Err(Error::invalid(format!(
                    "layer {} declares {} components but stores {}",
                    l.layer,
                    l.components,
                    l.weights.len()
                )));
            }
            GmmLayerModel::from_parts(l.layer, l.weights, l.means, l.covariances)
        })
        .collect::<Result<_>>()?;
    HfcModel::new(doc.target, layers)
}

pub fn save_hfc(model: &HfcModel, path: &Path) -> Result<()> {
    std::fs::write(path, hfc_to_json(model)).map_err(|e| Error::io(path, e))
}

pub fn load_hfc(path: &Path) -> Result<HfcModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    hfc_from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use crate::tensor::Tensor;

    fn identity_gmm(layer: usize, mean: Vec<f64>) -> GmmLayerModel {
        let d = mean.len();
        let cov = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
        GmmLayerModel::from_parts(layer, vec![1.0], vec![mean], vec![cov]).unwrap()
    }

    fn vector_net() -> Network {
        Network::new(
            vec![2],
            vec![
                LayerSpec::Affine { inputs: 2, outputs: 2 },
                LayerSpec::Relu,
                LayerSpec::Affine { inputs: 2, outputs: 2 },
            ],
            2,
            1,
        )
        .unwrap()
    }

    #[test]
    fn quarter_for_unit_offset() {
        let net = vector_net();
        let trace = net.forward(&Tensor::vector(vec![0.3, 0.7]), Mode::Eval, 0).unwrap();
        let f = channel_mean_features(&trace, 1).unwrap().into_data();
        let model = HfcModel::new(0, vec![identity_gmm(1, vec![f[0] - 1.0, f[1]])]).unwrap();
        assert!((hfc_loss(&model, &trace).unwrap() - 0.25).abs() < 1e-12);
        let at_mean = HfcModel::new(0, vec![identity_gmm(1, f.clone())]).unwrap();
        assert_eq!(hfc_loss(&at_mean, &trace).unwrap(), 0.0);
    }

    #[test]
    fn anomaly_is_squared_distance_under_identity() {
        let net = vector_net();
        let trace = net.forward(&Tensor::vector(vec![0.1, 0.2]), Mode::Eval, 0).unwrap();
        let f = channel_mean_features(&trace, 1).unwrap().into_data();
        let model = HfcModel::new(0, vec![identity_gmm(1, vec![f[0] - 3.0, f[1] - 4.0])]).unwrap();
        assert!((anomaly_score(&model, &trace).unwrap() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn target_mismatch_rejected() {
        let model = Arc::new(HfcModel::new(1, vec![identity_gmm(1, vec![0.0, 0.0])]).unwrap());
        assert!(attach_hfc(AttackKind::Bim, model.clone(), 0).is_err());
        assert_eq!(attach_hfc(AttackKind::Bim, model, 1).unwrap().len(), 1);
    }

    #[test]
    fn json_round_trip() {
        let model = HfcModel::new(1, vec![identity_gmm(3, vec![0.5, -0.25])]).unwrap();
        let back = hfc_from_json(&hfc_to_json(&model)).unwrap();
        assert_eq!(back.layers[0].means, model.layers[0].means);
        assert_eq!(back.lambdas, vec![0.5]);
        let broken = hfc_to_json(&model).replace("1.0,\n          0.0", "-1.0,\n          0.0");
        assert!(hfc_from_json(&broken).is_err());
    }
}
