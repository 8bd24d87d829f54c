//! Synthetic out-of-distribution lesions.
//!
//! Each lesion is an ellipse warped by a smooth random displacement field,
//! filled with Gaussian-smoothed salt noise at a random contrast relative to
//! the local mean, and blended in with a blurred edge ramp.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_LESION};
use crate::tensor::Tensor;

const MAX_TRIES: usize = 100;
const GRID: usize = 4;
const DISPLACEMENT: f64 = 0.3;
const SALT_RATE: f64 = 0.3;
const SMOOTHING_SIGMA: (f64, f64) = (0.5, 2.0);
const CONTRAST: (f64, f64) = (0.2, 0.5);
const EDGE_SIGMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionSize {
    Tiny,
    Small,
    Medium,
    Large,
}

impl LesionSize {
    pub const ALL: [LesionSize; 4] = [LesionSize::Tiny, LesionSize::Small, LesionSize::Medium, LesionSize::Large];

    /// Semi-axis range as a fraction of the image side.
    pub fn radius_range(self) -> (f64, f64) {
        match self {
            LesionSize::Tiny => (0.02, 0.04),
            LesionSize::Small => (0.04, 0.08),
            LesionSize::Medium => (0.08, 0.14),
            LesionSize::Large => (0.14, 0.22),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LesionSize::Tiny => "tiny",
            LesionSize::Small => "small",
            LesionSize::Medium => "medium",
            LesionSize::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub size: LesionSize,
    pub quantity: usize,
    pub seed: u64,
}

/// Adds `spec.quantity` lesions to a `[C, H, W]` (or `[H, W]`) image.
/// Returns the lesioned image and a binary `[H, W]` mask.
pub fn synth_lesions(image: &Tensor, spec: &LesionSpec) -> Result<(Tensor, Tensor)> {
    if spec.quantity == 0 {
        return Err(Error::invalid("lesion quantity must be at least 1"));
    }
    let (channels, h, w) = match *image.shape() {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::Shape(format!("lesions need a [C,H,W] image, got {s:?}"))),
    };
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("pixel {v} outside [0,1]")));
    }
    let mut rng = stream_rng(spec.seed, STREAM_LESION, 0);
    let mut mask = vec![false; h * w];
    let mut out = image.data().to_vec();
    for placed in 0..spec.quantity {
        let region = (0..MAX_TRIES)
            .map(|_| deformed_ellipse(&mut rng, spec.size, h, w))
            .find(|region| !touches(region, &mask, h, w))
            .ok_or_else(|| {
                Error::invalid(format!(
                    "could not place lesion {} of {} ({}) without overlap after {MAX_TRIES} tries; \
                     use a smaller quantity",
                    placed + 1,
                    spec.quantity,
                    spec.size.name()
                ))
            })?;
        paint(&mut out, &region, &mut rng, channels, h, w);
        for (m, &r) in mask.iter_mut().zip(&region) {
            *m |= r;
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    let mask = Tensor::new(vec![h, w], mask.iter().map(|&m| f64::from(u8::from(m))).collect())?;
    Ok((Tensor::new(image.shape().to_vec(), out)?, mask))
}

/// Binary region of one randomly placed, randomly warped ellipse.
fn deformed_ellipse(rng: &mut ChaCha8Rng, size: LesionSize, h: usize, w: usize) -> Vec<bool> {
    let side = h.min(w) as f64;
    let (lo, hi) = size.radius_range();
    let a = rng.gen_range(lo..hi) * side;
    let b = rng.gen_range(lo..hi) * side;
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let reach = a.max(b);
    let centre = |extent: usize, rng: &mut ChaCha8Rng| {
        let extent = extent as f64;
        if extent > 2.0 * reach {
            rng.gen_range(reach..extent - reach)
        } else {
            extent / 2.0
        }
    };
    let cy = centre(h, rng);
    let cx = centre(w, rng);
    let amp = DISPLACEMENT * a.min(b);
    let field: Vec<(f64, f64)> =
        (0..GRID * GRID).map(|_| (rng.gen_range(-amp..=amp), rng.gen_range(-amp..=amp))).collect();
    let (sin, cos) = theta.sin_cos();
    let mut region = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = bilinear(&field, y as f64 / h as f64, x as f64 / w as f64);
            let py = y as f64 + 0.5 + dy - cy;
            let px = x as f64 + 0.5 + dx - cx;
            let u = cos * px + sin * py;
            let v = -sin * px + cos * py;
            region[y * w + x] = (u / a).powi(2) + (v / b).powi(2) <= 1.0;
        }
    }
    // Sub-pixel lesions still cover the pixel holding their centre.
    let (iy, ix) = ((cy as usize).min(h - 1), (cx as usize).min(w - 1));
    region[iy * w + ix] = true;
    region
}

/// Bilinear interpolation of the displacement grid at fractional position
/// `(fy, fx)` in `[0, 1)`.
fn bilinear(field: &[(f64, f64)], fy: f64, fx: f64) -> (f64, f64) {
    let gy = fy * (GRID - 1) as f64;
    let gx = fx * (GRID - 1) as f64;
    let (y0, x0) = (gy.floor() as usize, gx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(GRID - 1), (x0 + 1).min(GRID - 1));
    let (ty, tx) = (gy - y0 as f64, gx - x0 as f64);
    let at = |y: usize, x: usize| field[y * GRID + x];
    let lerp = |p: (f64, f64), q: (f64, f64), t: f64| (p.0 + (q.0 - p.0) * t, p.1 + (q.1 - p.1) * t);
    lerp(lerp(at(y0, x0), at(y0, x1), tx), lerp(at(y1, x0), at(y1, x1), tx), ty)
}

/// True when `region` overlaps `mask` or touches it (8-neighbourhood).
fn touches(region: &[bool], mask: &[bool], h: usize, w: usize) -> bool {
    (0..h).any(|y| {
        (0..w).any(|x| {
            region[y * w + x]
                && (y.saturating_sub(1)..=(y + 1).min(h - 1))
                    .any(|ny| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|nx| mask[ny * w + nx]))
        })
    })
}

fn paint(out: &mut [f64], region: &[bool], rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize) {
    let salt: Vec<f64> = (0..h * w).map(|_| if rng.gen_bool(SALT_RATE) { 1.0 } else { 0.0 }).collect();
    let sigma = rng.gen_range(SMOOTHING_SIGMA.0..SMOOTHING_SIGMA.1);
    let texture = gaussian_blur(&salt, h, w, sigma);
    let inside: Vec<usize> = (0..h * w).filter(|&i| region[i]).collect();
    let (lo, hi) =
        inside.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(texture[i]), hi.max(texture[i])));
    let norm = |t: f64| if hi > lo { (t - lo) / (hi - lo) } else { 0.5 };
    let magnitude = rng.gen_range(CONTRAST.0..CONTRAST.1);
    let contrast = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
    let ramp = gaussian_blur(&region.iter().map(|&r| f64::from(u8::from(r))).collect::<Vec<_>>(), h, w, EDGE_SIGMA);
    for c in 0..channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        let local_mean = inside.iter().map(|&i| plane[i]).sum::<f64>() / inside.len() as f64;
        for &i in &inside {
            let lesion = local_mean + contrast * (0.5 + 0.5 * norm(texture[i]));
            let alpha = (2.0 * ramp[i]).min(1.0);
            plane[i] = (1.0 - alpha) * plane[i] + alpha * lesion;
        }
    }
}

/// Separable Gaussian blur with reflected borders.
pub(crate) fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / total).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * plane[y * w + reflect(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kv)| kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}
