//! Out-of-distribution detection with the HFC anomaly score on synthetic
//! lesions.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{synth_lesions, LabeledSet, LesionSize, LesionSpec};
use crate::error::{Error, Result};
use crate::evalkit::config::ExperimentConfig;
use crate::evalkit::experiment::{fit_hfc_models, Prepared};
use crate::evalkit::metrics::auc;
use crate::hfc::{anomaly_score, HfcModel};
use crate::nn::{Mode, Network};
use crate::rng::{derive_seed, STREAM_LESION};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodCell {
    pub size: LesionSize,
    pub quantity: usize,
    /// Lesioned images scored (images where placement failed are skipped).
    pub pairs: usize,
    pub skipped: usize,
    /// Lesioned (positive) versus clean (negative) anomaly-score AUC.
    pub auc: Option<f64>,
    /// Fraction of lesioned images the classifier no longer labels correctly.
    pub false_prediction_rate: Option<f64>,
    pub mean_lesion_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub clean_samples: usize,
    pub mean_clean_score: f64,
    pub cells: Vec<OodCell>,
}

impl OodReport {
    pub fn cell(&self, size: LesionSize, quantity: usize) -> Option<&OodCell> {
        self.cells.iter().find(|c| c.size == size && c.quantity == quantity)
    }
}

/// Anomaly score of `x` under the HFC model of its predicted class, and the
/// prediction itself.
pub fn hfc_score(net: &Network, models: &[Option<Arc<HfcModel>>], x: &Tensor) -> Result<(f64, usize)> {
    let trace = net.forward(x, Mode::Eval, 0)?;
    let pred = trace.predicted();
    let model = models
        .get(pred)
        .and_then(Option::as_ref)
        .ok_or_else(|| Error::invalid(format!("no HFC model for predicted class {pred}")))?;
    Ok((anomaly_score(model, &trace)?, pred))
}

/// Scores `clean` and lesioned copies of it for every `(size, quantity)`.
///
/// Image `i` gets lesion seed `derive_seed(seed, STREAM_LESION, i)` in every
/// cell, so cells are paired sample by sample. `models` is indexed by class;
/// each image is scored with the model of its predicted class.
pub fn ood_experiment(
    net: &Network,
    models: &[Option<Arc<HfcModel>>],
    clean: &LabeledSet,
    sizes: &[LesionSize],
    quantities: &[usize],
    seed: u64,
) -> Result<OodReport> {
    if clean.is_empty() {
        return Err(Error::invalid("OOD experiment needs clean images"));
    }
    if quantities.contains(&0) {
        return Err(Error::invalid("lesion quantities must be positive"));
    }
    let clean_scores =
        clean.images.par_iter().map(|x| hfc_score(net, models, x).map(|s| s.0)).collect::<Result<Vec<f64>>>()?;
    let mut cells = Vec::new();
    for &size in sizes {
        for &quantity in quantities {
            let scored = clean
                .images
                .par_iter()
                .zip(&clean.labels)
                .enumerate()
                .map(|(i, (x, &y))| {
                    let spec = LesionSpec { size, quantity, seed: derive_seed(seed, STREAM_LESION, i as u64) };
                    match synth_lesions(x, &spec) {
                        Ok((lesioned, _)) => hfc_score(net, models, &lesioned).map(|(s, p)| Some((s, p != y))),
                        Err(Error::InvalidArgument(_)) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<Option<(f64, bool)>>>>()?;
            let kept: Vec<(f64, bool)> = scored.iter().flatten().copied().collect();
            let scores: Vec<f64> = kept.iter().map(|k| k.0).collect();
            let n = kept.len();
            cells.push(OodCell {
                size,
                quantity,
                pairs: n,
                skipped: scored.len() - n,
                auc: if n > 0 { Some(auc(&scores, &clean_scores)?) } else { None },
                false_prediction_rate: (n > 0).then(|| kept.iter().filter(|k| k.1).count() as f64 / n as f64),
                mean_lesion_score: (n > 0).then(|| scores.iter().sum::<f64>() / n as f64),
            });
        }
    }
    Ok(OodReport {
        clean_samples: clean.len(),
        mean_clean_score: clean_scores.iter().sum::<f64>() / clean_scores.len() as f64,
        cells,
    })
}

/// OOD run of a config: HFC models for every class fitted on Train, clean
/// images taken from the test pool (AdvTrain then AdvTest) up to
/// `ood.pairs`, lesion seeds from the config's lesion sub-seed.
pub fn run_ood(cfg: &ExperimentConfig, prep: &Prepared) -> Result<(OodReport, Vec<Option<Arc<HfcModel>>>)> {
    let sec = cfg.ood.clone().unwrap_or_default();
    let all = (0..prep.classes).collect();
    let (models, _) = fit_hfc_models(cfg, &prep.network, &prep.split.train, &all).map_err(|e| e.in_stage("hfc"))?;
    let sp = &prep.split;
    let mut pool = sp.adv_train.clone();
    pool.images.extend(sp.adv_test.images.iter().cloned());
    pool.labels.extend(sp.adv_test.labels.iter().copied());
    pool.images.truncate(sec.pairs);
    pool.labels.truncate(sec.pairs);
    let report = ood_experiment(&prep.network, &models, &pool, &sec.sizes, &sec.quantities, prep.seeds.lesion)?;
    Ok((report, models))
}
