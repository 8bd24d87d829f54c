//! Targeted L∞ attacks: FGSM, BIM, PGD, MIM, TIM and the L∞ CW margin attack.
//!
//! Every attack minimizes a composite loss toward the target class with
//! signed steps `x - alpha * sign(grad)`, followed by projection onto the
//! ε-ball around the clean image and the `[0, 1]` box.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{runner_up, BaseLoss, LossSpec, Mode, Network, WeightedTerm};
use crate::rng::{derive_seed, stream_rng, STREAM_ATTACK};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.02 / 256.0;
pub const DEFAULT_MIM_DECAY: f64 = 1.0;
pub const DEFAULT_TIM_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    Mim {
        #[serde(default = "default_decay")]
        decay: f64,
    },
    Tim {
        #[serde(default = "default_radius")]
        radius: usize,
    },
    /// `kappa = None` means "use [`kappa_default`] on the clean data".
    Cw {
        #[serde(default)]
        kappa: Option<f64>,
    },
}

fn default_decay() -> f64 {
    DEFAULT_MIM_DECAY
}

fn default_radius() -> usize {
    DEFAULT_TIM_RADIUS
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
            AttackKind::Mim { .. } => "mim",
            AttackKind::Tim { .. } => "tim",
            AttackKind::Cw { .. } => "cw",
        }
    }

    /// Parses `fgsm`, `bim`, `pgd`, `mim`, `tim` or `cw` with default parameters.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name.to_ascii_lowercase().as_str() {
            "fgsm" => AttackKind::Fgsm,
            "bim" => AttackKind::Bim,
            "pgd" => AttackKind::Pgd,
            "mim" => AttackKind::Mim { decay: DEFAULT_MIM_DECAY },
            "tim" => AttackKind::Tim { radius: DEFAULT_TIM_RADIUS },
            "cw" => AttackKind::Cw { kappa: None },
            other => return Err(Error::invalid(format!("unknown attack kind `{other}`"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AttackKind::Mim { decay } if !(decay > 0.0 && decay <= 1.0) => {
                Err(Error::invalid(format!("MIM decay must lie in (0,1], got {decay}")))
            }
            AttackKind::Tim { radius: 0 } => Err(Error::invalid("TIM kernel radius must be at least 1")),
            AttackKind::Cw { kappa: Some(k) } if !(k >= 0.0) => {
                Err(Error::invalid(format!("CW kappa must be non-negative, got {k}")))
            }
            _ => Ok(()),
        }
    }
}

/// Perturbation budget and iteration schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackBudget {
    /// Budget with the default step size and `T = ceil(2 * epsilon / alpha)`.
    pub fn new(epsilon: f64) -> Self {
        AttackBudget {
            epsilon,
            alpha: DEFAULT_ALPHA,
            iterations: default_iterations(epsilon, DEFAULT_ALPHA),
            random_start: false,
            seed: 0,
        }
    }

    /// Replaces alpha and recomputes the default iteration count.
    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self.iterations = default_iterations(self.epsilon, alpha);
        self
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iteration count must be at least 1"));
        }
        Ok(())
    }
}

/// `ceil(2 * epsilon / alpha)`, at least 1, tolerant to rounding in the ratio.
pub fn default_iterations(epsilon: f64, alpha: f64) -> usize {
    ((2.0 * epsilon / alpha) - 1e-9).ceil().max(1.0) as usize
}

/// State observed at the start of one attack iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub loss: f64,
    pub target_prob: f64,
    /// Gradient of the composite loss with respect to the penultimate features.
    pub penultimate_grad: Vec<f64>,
    /// Penultimate features minus those of the clean image.
    pub feature_delta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub target: usize,
    pub predicted: usize,
    /// `predicted == target`.
    pub success: bool,
    pub iterations_run: usize,
    pub per_iteration: Option<Vec<IterationRecord>>,
}

/// Clamps `x_cand` into `[x0 - eps, x0 + eps]` and then into `[0, 1]`.
pub fn project_linf(x_cand: &Tensor, x0: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !x_cand.same_shape(x0) {
        return Err(Error::Shape(format!(
            "candidate shape {:?} differs from clean shape {:?}",
            x_cand.shape(),
            x0.shape()
        )));
    }
    let data =
        x_cand.data().iter().zip(x0.data()).map(|(&c, &o)| c.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0)).collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `sign` with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_input(net: &Network, x: &Tensor, target: usize) -> Result<()> {
    if x.shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match network input {:?}",
            x.shape(),
            net.input_shape()
        )));
    }
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("attack input pixel {v} outside [0,1]")));
    }
    if target >= net.num_classes() {
        return Err(Error::invalid(format!("target class {target} out of range for {} classes", net.num_classes())));
    }
    Ok(())
}

fn finish(
    net: &Network,
    x_adv: Tensor,
    target: usize,
    iterations: usize,
    records: Option<Vec<IterationRecord>>,
) -> Result<AttackResult> {
    let predicted = net.predict(&x_adv)?;
    Ok(AttackResult {
        x_adv,
        target,
        predicted,
        success: predicted == target,
        iterations_run: iterations,
        per_iteration: records,
    })
}

/// Single signed step of size epsilon on the cross-entropy toward `target`.
pub fn fgsm(net: &Network, x: &Tensor, target: usize, epsilon: f64) -> Result<AttackResult> {
    check_input(net, x, target)?;
    let (_, grad) = net.grad_input(x, &LossSpec::cross_entropy(target))?;
    let cand = step(x, &grad, epsilon);
    finish(net, project_linf(&cand, x, epsilon)?, target, 1, None)
}

fn step(x: &Tensor, direction: &Tensor, alpha: f64) -> Tensor {
    let data = x.data().iter().zip(direction.data()).map(|(&v, &g)| v - alpha * sign(g)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape as x")
}

/// Runs one targeted attack. `extras` are added to the base loss (for
/// example the HFC term). With `record`, the state at every iteration is
/// kept for the theorem probes.
///
/// FGSM ignores `alpha` and `iterations` and takes a single step of size
/// epsilon. CW with `kappa = None` uses `kappa = 0`; callers wanting the
/// data-driven default resolve it with [`kappa_default`] first.
pub fn iterative_attack(
    kind: AttackKind,
    net: &Network,
    x: &Tensor,
    target: usize,
    budget: &AttackBudget,
    extras: &[WeightedTerm],
    record: bool,
) -> Result<AttackResult> {
    check_input(net, x, target)?;
    let base = match kind {
        AttackKind::Cw { kappa } => BaseLoss::CwMargin { target, kappa: kappa.unwrap_or(0.0) },
        _ => BaseLoss::CrossEntropy { target },
    };
    let loss = LossSpec { base: Some(base), extras: extras.to_vec() };
    let (x_adv, iterations, records) = optimize(kind, net, x, &loss, budget, record.then_some(target))?;
    finish(net, x_adv, target, iterations, records)
}

/// Runs the update rule of `kind` on an arbitrary composite loss and returns
/// the final iterate. The base loss inside `loss` is used as given, so a CW
/// `kind` only changes the update schedule here.
pub fn minimize_loss(
    kind: AttackKind,
    net: &Network,
    x: &Tensor,
    loss: &LossSpec,
    budget: &AttackBudget,
) -> Result<Tensor> {
    if x.shape() != net.input_shape() {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match network input {:?}",
            x.shape(),
            net.input_shape()
        )));
    }
    Ok(optimize(kind, net, x, loss, budget, None)?.0)
}

/// The shared signed-gradient loop. Records per-iteration state when
/// `record_target` is given (its probability is logged).
fn optimize(
    kind: AttackKind,
    net: &Network,
    x: &Tensor,
    loss: &LossSpec,
    budget: &AttackBudget,
    record_target: Option<usize>,
) -> Result<(Tensor, usize, Option<Vec<IterationRecord>>)> {
    kind.validate()?;
    budget.validate()?;
    let (alpha, iterations) = match kind {
        AttackKind::Fgsm => (budget.epsilon, 1),
        _ => (budget.alpha, budget.iterations),
    };
    let mut x_t = if matches!(kind, AttackKind::Pgd) || budget.random_start {
        let mut rng = stream_rng(budget.seed, STREAM_ATTACK, 0);
        let eps = budget.epsilon;
        let mut noisy = x.clone();
        if eps > 0.0 {
            noisy.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-eps..=eps));
        }
        project_linf(&noisy, x, eps)?
    } else {
        x.clone()
    };
    let penultimate = net.penultimate_layer();
    let clean_features = match (record_target, penultimate) {
        (Some(_), Some(layer)) => Some(net.forward(x, Mode::Eval, 0)?.activations[layer].clone()),
        _ => None,
    };
    let mut records = record_target.map(|_| Vec::new());
    let mut momentum = Tensor::zeros(x.shape());
    for _ in 0..iterations {
        let ev = net.evaluate_loss(&x_t, loss, Mode::Eval, 0, false)?;
        if !ev.value.is_finite() || !ev.input_grad.is_finite() {
            return Err(Error::Numerical(format!("{} attack produced a non-finite loss or gradient", kind.name())));
        }
        if let (Some(recs), Some(layer), Some(z0), Some(target)) =
            (records.as_mut(), penultimate, clean_features.as_ref(), record_target)
        {
            let z = &ev.trace.activations[layer];
            recs.push(IterationRecord {
                loss: ev.value,
                target_prob: ev.trace.probs[target],
                penultimate_grad: ev.penultimate_grad.as_ref().map(|g| g.data().to_vec()).unwrap_or_default(),
                feature_delta: z.data().iter().zip(z0.data()).map(|(a, b)| a - b).collect(),
            });
        }
        let direction = match kind {
            AttackKind::Mim { decay } => {
                let l1: f64 = ev.input_grad.data().iter().map(|g| g.abs()).sum();
                momentum = momentum.map(|m| decay * m);
                if l1 > 0.0 {
                    momentum.add_scaled(&ev.input_grad, 1.0 / l1);
                }
                momentum.clone()
            }
            AttackKind::Tim { radius } => translation_smooth(&ev.input_grad, radius),
            _ => ev.input_grad,
        };
        x_t = project_linf(&step(&x_t, &direction, alpha), x, budget.epsilon)?;
    }
    Ok((x_t, iterations, records))
}

/// Convolves each channel of `grad` with a normalized `(2r+1)^2` box kernel
/// using reflected borders.
fn translation_smooth(grad: &Tensor, radius: usize) -> Tensor {
    let (channels, h, w) = match *grad.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return grad.clone(),
    };
    let r = radius as isize;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let src = grad.data();
    let mut out = vec![0.0; src.len()];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -r..=r {
                        acc += plane[yy * w + reflect(x as isize + dx, w)];
                    }
                }
                out[c * h * w + y * w + x] = acc / norm;
            }
        }
    }
    Tensor::new(grad.shape().to_vec(), out).expect("same shape as grad")
}

/// Attacks every `(x, target)` pair in parallel. Sample `i` uses the budget
/// seed `derive_seed(budget.seed, STREAM_ATTACK, i)`, so results do not
/// depend on the thread count.
pub fn attack_many(
    kind: AttackKind,
    net: &Network,
    xs: &[Tensor],
    targets: &[usize],
    budget: &AttackBudget,
    extras: &[WeightedTerm],
    record: bool,
) -> Result<Vec<AttackResult>> {
    if xs.len() != targets.len() {
        return Err(Error::invalid(format!("{} images but {} targets", xs.len(), targets.len())));
    }
    xs.par_iter()
        .zip(targets.par_iter())
        .enumerate()
        .map(|(i, (x, &t))| {
            let b = AttackBudget { seed: derive_seed(budget.seed, STREAM_ATTACK, i as u64), ..*budget };
            iterative_attack(kind, net, x, t, &b, extras, record)
        })
        .collect()
}

/// Mean gap between the largest and second-largest logit over `images`.
pub fn kappa_default(net: &Network, images: &[Tensor]) -> Result<f64> {
    if net.num_classes() < 2 {
        return Err(Error::invalid("kappa needs at least two classes"));
    }
    if images.is_empty() {
        return Err(Error::invalid("kappa needs at least one image"));
    }
    let gaps = images
        .par_iter()
        .map(|x| {
            let logits = net.logits(x)?;
            let top = crate::tensor::argmax(&logits);
            Ok(logits[top] - logits[runner_up(&logits, top)])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Writes `iteration,loss,target_prob,sign_agreement` rows, where the
/// agreement is measured against `expected_signs` (one entry per
/// penultimate unit).
pub fn export_trace_csv(records: &[IterationRecord], expected_signs: &[f64], path: &Path) -> Result<()> {
    let mut out = String::from("iteration,loss,target_prob,sign_agreement\n");
    for (t, r) in records.iter().enumerate() {
        let agree = sign_agreement(&r.penultimate_grad, expected_signs);
        let _ = writeln!(out, "{t},{:?},{:?},{:?}", r.loss, r.target_prob, agree);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Fraction of components whose gradient sign equals `expected`.
pub fn sign_agreement(grad: &[f64], expected: &[f64]) -> f64 {
    if grad.is_empty() {
        return 1.0;
    }
    let hits = grad.iter().zip(expected).filter(|(&g, &e)| sign(g) == sign(e)).count();
    hits as f64 / grad.len() as f64
}
