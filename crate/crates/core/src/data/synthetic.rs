use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_DATA};
use crate::tensor::Tensor;

const BASE_LEVEL: f64 = 0.5;
const WAVES: usize = 3;

/// Appearance knobs of [`gen_synthetic_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    /// Peak amplitude of each low-frequency background wave.
    pub wave_amplitude: f64,
    /// Standard deviation of i.i.d. pixel noise.
    pub pixel_noise: f64,
    /// Ring brightness of class 0.
    pub ring_contrast: f64,
    /// Added ring brightness per class index.
    pub contrast_step: f64,
    /// Ring-centre jitter as a fraction of the side.
    pub jitter: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            wave_amplitude: 0.01,
            pixel_noise: 0.003,
            ring_contrast: 0.004,
            contrast_step: 0.002,
            jitter: 0.03,
        }
    }
}

/// [`gen_synthetic_with`] using [`SyntheticParams::default`].
pub fn gen_synthetic(classes: usize, per_class: usize, side: usize, seed: u64) -> Result<LabeledSet> {
    gen_synthetic_with(classes, per_class, side, seed, &SyntheticParams::default())
}

/// Generates `per_class` single-channel `side`x`side` images for each of
/// `classes` classes.
///
/// Each image is a smooth random background; class `c` adds `c + 1`
/// concentric ring marks around a jittered centre with a class-dependent
/// brightness, so classes are learnable yet overlap through placement and
/// background variation.
pub fn gen_synthetic_with(
    classes: usize,
    per_class: usize,
    side: usize,
    seed: u64,
    params: &SyntheticParams,
) -> Result<LabeledSet> {
    if classes < 2 || per_class < 1 || side < 8 {
        return Err(Error::invalid(format!(
            "need classes >= 2, per_class >= 1 and side >= 8 (got {classes}, {per_class}, {side})"
        )));
    }
    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let class = i % classes;
        images.push(render(class, classes, side, params, &mut stream_rng(seed, STREAM_DATA, i as u64)));
        labels.push(class);
    }
    LabeledSet::new(images, labels, classes)
}

fn render(class: usize, classes: usize, side: usize, p: &SyntheticParams, rng: &mut impl Rng) -> Tensor {
    let s = side as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            (
                rng.gen_range(-1.5..1.5) * 2.0 * PI / s,
                rng.gen_range(-1.5..1.5) * 2.0 * PI / s,
                rng.gen_range(0.0..2.0 * PI),
                p.wave_amplitude * rng.gen_range(0.5..1.0),
            )
        })
        .collect();
    let contrast = p.ring_contrast + p.contrast_step * class as f64;
    let cy = s * (0.5 + rng.gen_range(-1.0..=1.0) * p.jitter);
    let cx = s * (0.5 + rng.gen_range(-1.0..=1.0) * p.jitter);
    // Radii spread evenly between 10% and 40% of the side.
    let spacing = 0.3 / classes.max(2).saturating_sub(1) as f64;
    let radii: Vec<f64> = (0..=class).map(|j| (0.1 + spacing * j as f64) * s).collect();
    let width = (0.25 * spacing * s).max(0.5);
    let mut data = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = BASE_LEVEL;
            for &(ky, kx, phase, amp) in &waves {
                v += amp * (ky * fy + kx * fx + phase).cos();
            }
            let d = ((fy - cy).powi(2) + (fx - cx).powi(2)).sqrt();
            for &r in &radii {
                v += contrast * (-(d - r).powi(2) / (2.0 * width * width)).exp();
            }
            let z: f64 = rng.sample(StandardNormal);
            v += p.pixel_noise * z;
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Tensor::new(vec![1, side, side], data).expect("image shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_shaped() {
        let set = gen_synthetic(2, 100, 16, 7).unwrap();
        assert_eq!(set.len(), 200);
        assert_eq!(set.class_counts(), vec![100, 100]);
        assert!(set.images.iter().all(|im| im.shape() == [1, 16, 16]));
    }

    #[test]
    fn deterministic() {
        assert_eq!(gen_synthetic(3, 5, 12, 3).unwrap(), gen_synthetic(3, 5, 12, 3).unwrap());
        assert_ne!(gen_synthetic(3, 5, 12, 3).unwrap(), gen_synthetic(3, 5, 12, 4).unwrap());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(gen_synthetic(1, 5, 16, 0).is_err());
        assert!(gen_synthetic(2, 0, 16, 0).is_err());
        assert!(gen_synthetic(2, 5, 7, 0).is_err());
    }
}
