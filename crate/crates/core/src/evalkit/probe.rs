//! Probes of the gradient-direction theorems on the penultimate layer.
//!
//! Binary case: along a targeted attack on cross-entropy or the CW margin,
//! `dJ/dz_i` keeps the sign of `w_{i,other} - w_{i,target}` at every
//! iteration. Multi-class case: every unit whose target weight is no
//! smaller than all other class weights has `dJ/dz_i <= 0`, so the attack
//! can only push it up.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{iterative_attack, AttackBudget, AttackKind, IterationRecord};
use crate::error::{Error, Result};
use crate::evalkit::config::{config_err, ExperimentConfig};
use crate::evalkit::experiment::{resolve_attack, targets_for, Prepared};
use crate::nn::{Mode, Network};
use crate::rng::{derive_seed, STREAM_ATTACK, STREAM_PROBE};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    /// Fixed gradient signs, binary classifiers.
    Binary,
    /// Non-positive gradients on dominant-weight units, multi-class.
    MultiClass,
}

impl Theorem {
    /// The probe matching a class count.
    pub fn for_classes(classes: usize) -> Self {
        if classes == 2 {
            Theorem::Binary
        } else {
            Theorem::MultiClass
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub theorem: Theorem,
    pub attack: String,
    pub samples: usize,
    /// Iterations where the target probability was below 1 and the
    /// penultimate gradient was not identically zero.
    pub iterations_checked: usize,
    pub iterations_skipped: usize,
    pub components_checked: usize,
    pub violations: usize,
    /// `1 - violations / components_checked` (1 when nothing was checked).
    pub sign_agreement: f64,
    /// Iterations whose feature steps enter the cosine matrix.
    pub cosine_iterations: Vec<usize>,
    /// Sample-averaged cosine similarity of per-iteration penultimate steps.
    pub cosine: Vec<Vec<f64>>,
    /// Per-sample Pearson correlation between the total feature change and
    /// the target-minus-other weight difference (NaN-free: samples with a
    /// constant side are skipped).
    pub weight_correlation: Vec<f64>,
    pub mean_weight_correlation: Option<f64>,
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn cosine(a: &[f64], b: &[f64], same: bool) -> f64 {
    if same {
        return 1.0;
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Pearson correlation, `None` if either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Evenly spaced picks of `points` indices from `0..n`.
fn spaced(n: usize, points: usize) -> Vec<usize> {
    if n == 0 || points == 0 {
        return Vec::new();
    }
    if points >= n {
        return (0..n).collect();
    }
    let mut out: Vec<usize> =
        (0..points).map(|j| ((j as f64) * (n - 1) as f64 / (points - 1).max(1) as f64).round() as usize).collect();
    out.dedup();
    out
}

struct SampleProbe {
    checked: usize,
    skipped: usize,
    components: usize,
    violations: usize,
    steps: Vec<Vec<f64>>,
    correlation: Option<f64>,
}

/// Runs `kind` on each `(xs[i], targets[i])` with per-iteration recording
/// and checks the theorem for the class count of `net`.
pub fn theorem_probe(
    net: &Network,
    xs: &[Tensor],
    targets: &[usize],
    kind: AttackKind,
    budget: &AttackBudget,
    theorem: Theorem,
    cosine_points: usize,
) -> Result<ProbeReport> {
    let k = net.num_classes();
    match theorem {
        Theorem::Binary if k != 2 => {
            return Err(Error::invalid(format!("the binary probe needs 2 classes, network has {k}")))
        }
        Theorem::MultiClass if k < 3 => {
            return Err(Error::invalid(format!("the multi-class probe needs at least 3 classes, network has {k}")))
        }
        _ => {}
    }
    if xs.len() != targets.len() {
        return Err(Error::invalid(format!("{} images but {} targets", xs.len(), targets.len())));
    }
    let w = net.final_weights();
    let penultimate = net.penultimate_layer().ok_or_else(|| Error::invalid("probes need a hidden layer"))?;
    let per_sample = xs
        .par_iter()
        .zip(targets.par_iter())
        .enumerate()
        .map(|(i, (x, &t))| {
            let b = AttackBudget { seed: derive_seed(budget.seed, STREAM_ATTACK, i as u64), ..*budget };
            let res = iterative_attack(kind, net, x, t, &b, &[], true)?;
            let records = res.per_iteration.unwrap_or_default();
            let z0 = net.forward(x, Mode::Eval, 0)?.activations[penultimate].clone();
            let z_end = net.forward(&res.x_adv, Mode::Eval, 0)?.activations[penultimate].clone();
            Ok(probe_sample(&w, t, theorem, &records, &z0, &z_end))
        })
        .collect::<Result<Vec<SampleProbe>>>()?;

    let mut report = ProbeReport {
        theorem,
        attack: kind.name().to_string(),
        samples: xs.len(),
        iterations_checked: 0,
        iterations_skipped: 0,
        components_checked: 0,
        violations: 0,
        sign_agreement: 1.0,
        cosine_iterations: Vec::new(),
        cosine: Vec::new(),
        weight_correlation: Vec::new(),
        mean_weight_correlation: None,
    };
    for s in &per_sample {
        report.iterations_checked += s.checked;
        report.iterations_skipped += s.skipped;
        report.components_checked += s.components;
        report.violations += s.violations;
        report.weight_correlation.extend(s.correlation);
    }
    if report.components_checked > 0 {
        report.sign_agreement = 1.0 - report.violations as f64 / report.components_checked as f64;
    }
    if !report.weight_correlation.is_empty() {
        report.mean_weight_correlation =
            Some(report.weight_correlation.iter().sum::<f64>() / report.weight_correlation.len() as f64);
    }
    let steps = per_sample.iter().map(|s| s.steps.len()).min().unwrap_or(0);
    let picks = spaced(steps, cosine_points);
    let m = picks.len();
    let mut cos = vec![vec![0.0; m]; m];
    for s in &per_sample {
        for (a, &ia) in picks.iter().enumerate() {
            for (b, &ib) in picks.iter().enumerate() {
                cos[a][b] += cosine(&s.steps[ia], &s.steps[ib], a == b) / per_sample.len() as f64;
            }
        }
    }
    // averaging ones over samples can round; the diagonal is one by definition
    for (a, row) in cos.iter_mut().enumerate() {
        row[a] = 1.0;
    }
    report.cosine_iterations = picks;
    report.cosine = cos;
    Ok(report)
}

fn probe_sample(
    w: &[Vec<f64>],
    t: usize,
    theorem: Theorem,
    records: &[IterationRecord],
    z0: &Tensor,
    z_end: &Tensor,
) -> SampleProbe {
    let width = w[t].len();
    let others: Vec<usize> = (0..w.len()).filter(|&k| k != t).collect();
    // binary: expected sign of w_other - w_target; multi-class: eligibility
    let expected: Vec<i8> = (0..width).map(|i| sign(w[others[0]][i] - w[t][i])).collect();
    let eligible: Vec<bool> = (0..width).map(|i| others.iter().all(|&k| w[t][i] >= w[k][i])).collect();
    let mut out =
        SampleProbe { checked: 0, skipped: 0, components: 0, violations: 0, steps: Vec::new(), correlation: None };
    for r in records {
        let g = &r.penultimate_grad;
        if !(r.target_prob < 1.0) || g.iter().all(|&v| v == 0.0) {
            out.skipped += 1;
            continue;
        }
        out.checked += 1;
        match theorem {
            Theorem::Binary => {
                out.components += width;
                out.violations += g.iter().zip(&expected).filter(|(&gi, &e)| sign(gi) != e).count();
            }
            Theorem::MultiClass => {
                for (gi, _) in g.iter().zip(&eligible).filter(|(_, &e)| e) {
                    out.components += 1;
                    if *gi > 0.0 {
                        out.violations += 1;
                    }
                }
            }
        }
    }
    for pair in records.windows(2) {
        out.steps.push(pair[1].feature_delta.iter().zip(&pair[0].feature_delta).map(|(a, b)| a - b).collect());
    }
    let change: Vec<f64> = z_end.data().iter().zip(z0.data()).map(|(a, b)| a - b).collect();
    let diff: Vec<f64> =
        (0..width).map(|i| w[t][i] - others.iter().map(|&k| w[k][i]).sum::<f64>() / others.len() as f64).collect();
    out.correlation = pearson(&change, &diff);
    out
}

/// Runs the configured theorem probe on the first `probe.samples` clean
/// AdvTest images with their usual attack targets.
pub fn run_probe(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ProbeReport> {
    let sec = cfg.probe.as_ref().ok_or_else(|| config_err("probe", "the probe command needs a [probe] section"))?;
    let theorem = match sec.theorem {
        None => Theorem::for_classes(prep.classes),
        Some(1) => Theorem::Binary,
        Some(2) => Theorem::MultiClass,
        Some(t) => return Err(config_err("probe.theorem", format!("expected 1 or 2, got {t}"))),
    };
    let (kind, _) = resolve_attack(&prep.network, &prep.split.train, &sec.attack, "probe.attack")?;
    let set = &prep.split.adv_test;
    let n = sec.samples.min(set.len());
    let targets = targets_for(cfg, set, 1);
    let budget = sec.attack.budget(derive_seed(prep.seeds.attack, STREAM_PROBE, 0));
    theorem_probe(&prep.network, &set.images[..n], &targets[..n], kind, &budget, theorem, sec.cosine_points)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn spaced_picks() {
        assert_eq!(spaced(5, 10), vec![0, 1, 2, 3, 4]);
        assert_eq!(spaced(11, 3), vec![0, 5, 10]);
        assert!(spaced(0, 3).is_empty());
    }
}
