//! Adversarial vulnerability as a function of input dimensionality.

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::evalkit::config::{AttackSpec, DataSource, ExperimentConfig};
use crate::evalkit::experiment::{attack_pool, prepare_set, targets_for};
use crate::evalkit::metrics::adv_acc;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionRow {
    pub side: usize,
    /// Side the images were generated at before average-pooling, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downsampled_from: Option<usize>,
    pub test_accuracy: f64,
    pub attacked: usize,
    pub adv_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionalityReport {
    pub attack: String,
    pub epsilon: f64,
    pub rows: Vec<DimensionRow>,
}

impl DimensionalityReport {
    pub fn row(&self, side: usize, downsampled: bool) -> Option<&DimensionRow> {
        self.rows.iter().find(|r| r.side == side && r.downsampled_from.is_some() == downsampled)
    }
}

/// Average-pools every image by an integer factor.
pub fn downsample(set: &LabeledSet, factor: usize) -> Result<LabeledSet> {
    if factor == 0 {
        return Err(Error::invalid("downsampling factor must be positive"));
    }
    let images = set
        .images
        .iter()
        .map(|img| {
            let &[c, h, w] = img.shape() else {
                return Err(Error::Shape(format!("downsampling needs [C,H,W] images, got {:?}", img.shape())));
            };
            if h % factor != 0 || w % factor != 0 {
                return Err(Error::invalid(format!("{h}x{w} is not divisible by {factor}")));
            }
            let (oh, ow) = (h / factor, w / factor);
            let norm = (factor * factor) as f64;
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[(ch * oh + y / factor) * ow + x / factor] += img.data()[(ch * h + y) * w + x] / norm;
                    }
                }
            }
            Tensor::new(vec![c, oh, ow], out)
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledSet::new(images, set.labels.clone(), set.num_classes)
}

/// Trains the configured architecture at every side and attacks AdvTest
/// with the same budget. `cfg.data.source` must be synthetic; its `side` is
/// replaced per row. With `downsample`, images generated at the largest
/// side are also average-pooled to each smaller side that divides it.
pub fn dimensionality_sweep(
    cfg: &ExperimentConfig,
    sides: &[usize],
    attack: &AttackSpec,
    downsample_variant: bool,
) -> Result<DimensionalityReport> {
    if sides.len() < 2 {
        return Err(Error::invalid("dimensionality sweep needs at least two sides"));
    }
    let DataSource::Synthetic { .. } = cfg.data.source else {
        return Err(Error::invalid("dimensionality sweep needs a synthetic data source"));
    };
    let kind = attack.attack_kind("dimensionality.attack")?;
    let with_side = |side: usize| {
        let mut c = cfg.clone();
        if let DataSource::Synthetic { side: s, .. } = &mut c.data.source {
            *s = side;
        }
        c
    };
    let largest = *sides.iter().max().expect("non-empty");
    let mut jobs: Vec<(usize, Option<usize>)> = sides.iter().map(|&s| (s, None)).collect();
    if downsample_variant {
        jobs.extend(sides.iter().filter(|&&s| s < largest && largest.is_multiple_of(s)).map(|&s| (s, Some(largest))));
    }
    let mut rows = Vec::new();
    for (side, from) in jobs {
        let c = with_side(side);
        let set = match from {
            None => c.load_dataset()?,
            Some(big) => downsample(&with_side(big).load_dataset()?, big / side)?,
        };
        let prep = prepare_set(&c, &set, None)?;
        let targets = targets_for(&c, &prep.split.adv_test, 1);
        let budget = attack.budget(derive_seed(prep.seeds.attack, side as u64, u64::from(from.is_some())));
        let results = attack_pool(kind, &prep.network, &prep.split.adv_test.images, &targets, &budget, None)?;
        rows.push(DimensionRow {
            side,
            downsampled_from: from,
            test_accuracy: prep.test_accuracy,
            attacked: results.len(),
            adv_acc: if results.is_empty() { 0.0 } else { adv_acc(&results)? },
        });
    }
    Ok(DimensionalityReport { attack: attack.kind.clone(), epsilon: attack.epsilon, rows })
}
