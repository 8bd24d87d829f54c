//! Reactive adversarial-example detectors: KD, BU, LID, MAHA, RBF-SVM and
//! the per-layer DNN ensemble. Every score is oriented so that higher means
//! more adversarial.

mod bank;
mod bu;
mod dnn;
mod kd;
mod lid;
mod logistic;
mod maha;
mod svm;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bank::{detector_layers, extract_features, trace_features, FeatureBank, LayerFeatures};
pub use bu::BuModel;
pub use dnn::{fit_dnn_detector, DnnConfig, DnnModel, LayerDetector};
pub use kd::{kd_score, kernel_density, median_pairwise_distance, KdModel};
pub use lid::{lid_from_distances, lid_score, LidModel, LID_CAP};
pub use logistic::{fit_logistic, Logistic, DEFAULT_L2};
pub use maha::{maha_score, LayerStats, MahaModel};
pub use svm::{fit_rbf_svm, median_gamma, SvmModel, KKT_TOL};

use crate::error::{Error, Result};
use crate::nn::{ForwardTrace, Mode, Network};
use crate::tensor::Tensor;

pub const DETECTOR_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Kd,
    Bu,
    Lid,
    Maha,
    Svm,
    Dnn,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 6] = [
        DetectorKind::Kd,
        DetectorKind::Bu,
        DetectorKind::Lid,
        DetectorKind::Maha,
        DetectorKind::Svm,
        DetectorKind::Dnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Kd => "kd",
            DetectorKind::Bu => "bu",
            DetectorKind::Lid => "lid",
            DetectorKind::Maha => "maha",
            DetectorKind::Svm => "svm",
            DetectorKind::Dnn => "dnn",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::invalid(format!("unknown detector `{name}`")))
    }
}

/// Fitting knobs shared by all detectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub lid_k: usize,
    pub bu_passes: usize,
    pub bu_rate: f64,
    /// Class-conditional means with a tied covariance instead of one
    /// classless Gaussian per layer.
    pub maha_class_conditional: bool,
    pub logistic_l2: f64,
    pub svm_c: f64,
    pub dnn: DnnConfig,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            lid_k: 20,
            bu_passes: 50,
            bu_rate: 0.3,
            maha_class_conditional: false,
            logistic_l2: DEFAULT_L2,
            svm_c: 1.0,
            dnn: DnnConfig::default(),
            seed: 0,
        }
    }
}

/// A fitted detector.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorModel {
    Kd { penultimate_pos: usize, model: KdModel },
    Bu { penultimate_pos: usize, model: BuModel },
    Lid { layers: Vec<usize>, model: LidModel, combiner: Logistic },
    Maha { layers: Vec<usize>, model: MahaModel, combiner: Logistic },
    Svm { penultimate_pos: usize, model: SvmModel },
    Dnn { layers: Vec<usize>, model: DnnModel },
}

#[derive(Serialize, Deserialize)]
struct DetectorDoc {
    format_version: u32,
    layers: Vec<usize>,
    detector: DetectorModel,
}

/// A fitted detector plus the network layers its features come from.
#[derive(Debug, Clone)]
pub struct Detector {
    pub layers: Vec<usize>,
    pub model: DetectorModel,
}

fn combiner_rows(
    bank: &FeatureBank,
    per_layer: impl Fn(&[&[f64]]) -> Result<Vec<f64>>,
) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (pool, label) in [(&bank.adv_train_clean, false), (&bank.adv_train_adv, true)] {
        for i in 0..pool.len() {
            rows.push(per_layer(&pool.sample(i))?);
            labels.push(label);
        }
    }
    Ok((rows, labels))
}

/// Fits one detector kind on `bank`.
pub fn fit_detector(kind: DetectorKind, bank: &FeatureBank, cfg: &DetectorConfig) -> Result<Detector> {
    let p = bank.penultimate_pos;
    let model = match kind {
        DetectorKind::Kd => DetectorModel::Kd {
            penultimate_pos: p,
            model: KdModel::fit((0..bank.num_classes).map(|c| bank.class_penultimate(c)).collect()),
        },
        DetectorKind::Bu => {
            DetectorModel::Bu { penultimate_pos: p, model: BuModel { passes: cfg.bu_passes, rate: cfg.bu_rate } }
        }
        DetectorKind::Lid => {
            bank.require_both_classes()?;
            let model = LidModel { k: cfg.lid_k, references: bank.adv_train_clean.rows.clone() };
            let (rows, labels) = combiner_rows(bank, |f| model.layer_scores(f))?;
            DetectorModel::Lid {
                layers: bank.layers.clone(),
                combiner: fit_logistic(&rows, &labels, cfg.logistic_l2)?,
                model,
            }
        }
        DetectorKind::Maha => {
            bank.require_both_classes()?;
            let layers = bank
                .train
                .rows
                .iter()
                .map(|rows| {
                    if cfg.maha_class_conditional {
                        LayerStats::fit_class_conditional(rows, &bank.train_labels, bank.num_classes)
                    } else {
                        LayerStats::fit(rows)
                    }
                })
                .collect::<Result<_>>()?;
            let model = MahaModel { class_conditional: cfg.maha_class_conditional, layers };
            let (rows, labels) = combiner_rows(bank, |f| model.layer_scores(f))?;
            DetectorModel::Maha {
                layers: bank.layers.clone(),
                combiner: fit_logistic(&rows, &labels, cfg.logistic_l2)?,
                model,
            }
        }
        DetectorKind::Svm => {
            bank.require_both_classes()?;
            let (rows, labels) = combiner_rows(bank, |f| Ok(f[p].to_vec()))?;
            let gamma = median_gamma(&rows);
            DetectorModel::Svm { penultimate_pos: p, model: fit_rbf_svm(&rows, &labels, cfg.svm_c, gamma)? }
        }
        DetectorKind::Dnn => {
            bank.require_both_classes()?;
            DetectorModel::Dnn {
                layers: bank.layers.clone(),
                model: fit_dnn_detector(&bank.adv_train_clean.rows, &bank.adv_train_adv.rows, &cfg.dnn, cfg.seed)?,
            }
        }
    };
    Ok(Detector { layers: bank.layers.clone(), model })
}

impl DetectorModel {
    pub fn kind(&self) -> DetectorKind {
        match self {
            DetectorModel::Kd { .. } => DetectorKind::Kd,
            DetectorModel::Bu { .. } => DetectorKind::Bu,
            DetectorModel::Lid { .. } => DetectorKind::Lid,
            DetectorModel::Maha { .. } => DetectorKind::Maha,
            DetectorModel::Svm { .. } => DetectorKind::Svm,
            DetectorModel::Dnn { .. } => DetectorKind::Dnn,
        }
    }
}

impl Detector {
    pub fn kind(&self) -> DetectorKind {
        self.model.kind()
    }

    /// Scores precomputed per-layer features (`feats[i]` belongs to
    /// `self.layers[i]`). `seed` only matters for BU.
    pub fn score_features(&self, net: &Network, feats: &[&[f64]], predicted: usize, seed: u64) -> Result<f64> {
        if feats.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} feature layers for a detector over {} layers",
                feats.len(),
                self.layers.len()
            )));
        }
        match &self.model {
            DetectorModel::Kd { penultimate_pos, model } => model.score(feats[*penultimate_pos], predicted),
            DetectorModel::Bu { penultimate_pos, model } => model.score(net, feats[*penultimate_pos], seed),
            DetectorModel::Lid { model, combiner, .. } => Ok(combiner.probability(&model.layer_scores(feats)?)),
            DetectorModel::Maha { model, combiner, .. } => Ok(combiner.probability(&model.layer_scores(feats)?)),
            DetectorModel::Svm { penultimate_pos, model } => Ok(model.decision(feats[*penultimate_pos])),
            DetectorModel::Dnn { model, .. } => model.score(feats),
        }
    }

    pub fn score_trace(&self, net: &Network, trace: &ForwardTrace, seed: u64) -> Result<f64> {
        let feats = trace_features(trace, &self.layers)?;
        let refs: Vec<&[f64]> = feats.iter().map(Vec::as_slice).collect();
        self.score_features(net, &refs, trace.predicted(), seed)
    }

    /// Adversariality of `x`; higher means more adversarial.
    pub fn score(&self, net: &Network, x: &Tensor, seed: u64) -> Result<f64> {
        self.score_trace(net, &net.forward(x, Mode::Eval, 0)?, seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DetectorDoc {
            format_version: DETECTOR_FORMAT_VERSION,
            layers: self.layers.clone(),
            detector: self.model.clone(),
        })
        .expect("detector serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DetectorDoc = serde_json::from_str(text)?;
        if doc.format_version != DETECTOR_FORMAT_VERSION {
            return Err(Error::FormatVersion { found: doc.format_version, expected: DETECTOR_FORMAT_VERSION });
        }
        Ok(Detector { layers: doc.layers, model: doc.detector })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Detector::from_json(&text)
    }
}

/// One exported score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: usize,
    pub attack: String,
    pub detector: String,
    pub score: f64,
    /// 1 for adversarial, 0 for clean.
    pub label: u8,
}

/// Writes `sample_id,attack,detector,score,label` rows.
pub fn write_score_csv(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut out = String::from("sample_id,attack,detector,score,label\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:?},{}", r.sample_id, r.attack, r.detector, r.score, r.label);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
