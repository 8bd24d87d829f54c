//! Feedforward network with exact reverse-mode gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layer::{self, LayerSpec, Params};
use crate::nn::loss::{check_target, log_sum_exp, runner_up, softmax, BaseLoss, LossSpec};
use crate::nn::persist::ModelDoc;
use crate::rng::{stream_rng, STREAM_DROPOUT, STREAM_INIT};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Ordered layers plus trained parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelDoc", try_from = "ModelDoc")]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Option<Params>>,
    output_shapes: Vec<Vec<usize>>,
    num_classes: usize,
}

/// Every layer output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Tensor,
    /// Output of layer `i` at index `i`; the last entry equals the logits.
    pub activations: Vec<Tensor>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    masks: Vec<Option<Vec<f64>>>,
}

impl ForwardTrace {
    pub fn activation(&self, layer: usize) -> Result<&Tensor> {
        self.activations
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("layer {layer} not in trace ({} layers)", self.activations.len())))
    }

    pub fn predicted(&self) -> usize {
        crate::tensor::argmax(&self.logits)
    }

    pub fn layer_count(&self) -> usize {
        self.activations.len()
    }
}

/// Per-sample gradients from one backward pass.
#[derive(Debug, Clone)]
pub struct LossEvaluation {
    pub value: f64,
    pub input_grad: Tensor,
    /// Gradient with respect to the last hidden activation, when one exists.
    pub penultimate_grad: Option<Tensor>,
    pub param_grads: Option<Vec<Option<Params>>>,
    pub trace: ForwardTrace,
}

/// Gradient arriving at the logits, kept in factored form for the
/// softmax-cross-entropy part.
struct LogitGrad {
    dense: Vec<f64>,
    /// `scale * (p - onehot(target))`, applied through the final affine layer
    /// as `scale * Σ_{k≠t} p_k (w_k - w_t)` so the sign of each component is exact.
    softmax: Option<(usize, f64)>,
}

impl Network {
    /// Builds a network with He-initialized parameters drawn from `seed`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, num_classes: usize, seed: u64) -> Result<Self> {
        let output_shapes = infer_shapes(&input_shape, &layers, num_classes)?;
        let params = layers
            .iter()
            .enumerate()
            .map(|(i, spec)| spec.init_params(&mut stream_rng(seed, STREAM_INIT, i as u64)))
            .collect();
        Ok(Network { input_shape, layers, params, output_shapes, num_classes })
    }

    /// Builds a network from explicit parameters, validating every shape.
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Option<Params>>,
        num_classes: usize,
    ) -> Result<Self> {
        let output_shapes = infer_shapes(&input_shape, &layers, num_classes)?;
        if params.len() != layers.len() {
            return Err(Error::Shape(format!("{} parameter slots for {} layers", params.len(), layers.len())));
        }
        for (i, (spec, p)) in layers.iter().zip(&params).enumerate() {
            let err = |message: String| Error::LayerShape { layer: i, kind: spec.name().into(), message };
            match (spec.param_shapes(), p) {
                (None, None) => {}
                (None, Some(_)) => return Err(err("layer takes no parameters".into())),
                (Some(_), None) => return Err(err("missing parameters".into())),
                (Some((ws, bs)), Some(p)) => {
                    if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                        return Err(err(format!(
                            "parameter shapes {:?}/{:?}, expected {ws:?}/{bs:?}",
                            p.weight.shape(),
                            p.bias.shape()
                        )));
                    }
                    if !p.weight.is_finite() || !p.bias.is_finite() {
                        return Err(err("non-finite parameters".into()));
                    }
                }
            }
        }
        Ok(Network { input_shape, layers, params, output_shapes, num_classes })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<Params>] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Option<Params>] {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn output_shape(&self, layer: usize) -> &[usize] {
        &self.output_shapes[layer]
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Index of the last hidden layer (the input of the final affine layer).
    pub fn penultimate_layer(&self) -> Option<usize> {
        self.layers.len().checked_sub(2)
    }

    /// Indices of all ReLU outputs: the post-activation feature layers.
    pub fn activation_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| matches!(l, LayerSpec::Relu)).map(|(i, _)| i).collect()
    }

    /// Final affine weights as `[classes][penultimate width]`.
    pub fn final_weights(&self) -> Vec<Vec<f64>> {
        let p = self.params.last().and_then(|p| p.as_ref()).expect("final affine");
        let width = p.weight.shape()[1];
        p.weight.data().chunks(width).map(|r| r.to_vec()).collect()
    }

    pub fn final_bias(&self) -> Vec<f64> {
        let p = self.params.last().and_then(|p| p.as_ref()).expect("final affine");
        p.bias.data().to_vec()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::LayerShape {
                layer: 0,
                kind: self.layers[0].name().into(),
                message: format!("input shape {:?} does not match network input {:?}", x.shape(), self.input_shape),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, seed: u64) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        for (i, spec) in self.layers.iter().enumerate() {
            let input = if i == 0 { x } else { &activations[i - 1] };
            let mask = match (*spec, mode) {
                (LayerSpec::Dropout { rate }, Mode::Train) if rate > 0.0 => {
                    let mut rng = stream_rng(seed, STREAM_DROPOUT, i as u64);
                    let keep = 1.0 / (1.0 - rate);
                    Some((0..input.len()).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect::<Vec<_>>())
                }
                _ => None,
            };
            let out = layer::forward(spec, self.params[i].as_ref(), input, &self.output_shapes[i], mask.as_deref());
            activations.push(out);
            masks.push(mask);
        }
        let logits = activations.last().expect("non-empty").data().to_vec();
        let probs = softmax(&logits);
        Ok(ForwardTrace { input: x.clone(), activations, logits, probs, masks })
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Eval, 0)?.logits)
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(crate::tensor::argmax(&self.logits(x)?))
    }

    /// Logits from an arbitrary penultimate activation vector.
    pub fn logits_from_penultimate(&self, z: &[f64]) -> Vec<f64> {
        let w = self.final_weights();
        let b = self.final_bias();
        w.iter().zip(&b).map(|(row, bk)| row.iter().zip(z).map(|(a, v)| a * v).sum::<f64>() + bk).collect()
    }

    /// Forward + backward for a composite loss.
    pub fn evaluate_loss(
        &self,
        x: &Tensor,
        loss: &LossSpec,
        mode: Mode,
        seed: u64,
        want_params: bool,
    ) -> Result<LossEvaluation> {
        let trace = self.forward(x, mode, seed)?;
        self.evaluate_loss_on_trace(trace, loss, want_params)
    }

    pub fn evaluate_loss_on_trace(
        &self,
        trace: ForwardTrace,
        loss: &LossSpec,
        want_params: bool,
    ) -> Result<LossEvaluation> {
        let k = self.num_classes;
        let mut value = 0.0;
        let mut logit_grad = LogitGrad { dense: vec![0.0; k], softmax: None };
        match loss.base {
            None => {}
            Some(BaseLoss::CrossEntropy { target }) => {
                check_target(target, k)?;
                value += log_sum_exp(&trace.logits) - trace.logits[target];
                logit_grad.softmax = Some((target, 1.0));
            }
            Some(BaseLoss::CwMargin { target, kappa }) => {
                check_target(target, k)?;
                if k < 2 {
                    return Err(Error::invalid("cw margin needs at least two classes"));
                }
                let other = runner_up(&trace.logits, target);
                let margin = trace.logits[other] - trace.logits[target];
                if margin > -kappa {
                    value += margin;
                    logit_grad.dense[other] += 1.0;
                    logit_grad.dense[target] -= 1.0;
                } else {
                    value += -kappa;
                }
            }
        }
        let mut extra_grads: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        for term in &loss.extras {
            if term.weight == 0.0 {
                continue;
            }
            let tg = term.term.evaluate(&trace)?;
            value += term.weight * tg.value;
            for (layer, g) in tg.activation_grads {
                let shape = self
                    .output_shapes
                    .get(layer)
                    .ok_or_else(|| Error::invalid(format!("loss term references missing layer {layer}")))?;
                if g.shape() != shape.as_slice() {
                    return Err(Error::Shape(format!(
                        "loss term gradient for layer {layer} has shape {:?}, expected {shape:?}",
                        g.shape()
                    )));
                }
                match &mut extra_grads[layer] {
                    Some(acc) => acc.add_scaled(&g, term.weight),
                    slot @ None => {
                        let mut scaled = Tensor::zeros(shape);
                        scaled.add_scaled(&g, term.weight);
                        *slot = Some(scaled);
                    }
                }
            }
        }
        let (input_grad, penultimate_grad, param_grads) = self.backward(&trace, logit_grad, extra_grads, want_params);
        Ok(LossEvaluation { value, input_grad, penultimate_grad, param_grads, trace })
    }

    fn backward(
        &self,
        trace: &ForwardTrace,
        logit_grad: LogitGrad,
        mut extra_grads: Vec<Option<Tensor>>,
        want_params: bool,
    ) -> (Tensor, Option<Tensor>, Option<Vec<Option<Params>>>) {
        let n = self.layers.len();
        let mut param_grads: Option<Vec<Option<Params>>> =
            want_params.then(|| self.params.iter().map(|p| p.as_ref().map(Params::zeros_like)).collect());
        let mut grad = Tensor::new(vec![self.num_classes], logit_grad.dense).expect("logit grad");
        if let Some(extra) = extra_grads[n - 1].take() {
            grad.add_scaled(&extra, 1.0);
        }
        let mut penultimate = None;
        for i in (0..n).rev() {
            if i + 1 < n {
                if let Some(extra) = extra_grads[i].take() {
                    grad.add_scaled(&extra, 1.0);
                }
                if i + 2 == n {
                    penultimate = Some(grad.clone());
                }
            }
            let input = if i == 0 { &trace.input } else { &trace.activations[i - 1] };
            let pg = param_grads.as_mut().and_then(|v| v[i].as_mut());
            if i + 1 == n {
                grad = self.final_backward(input, &grad, logit_grad.softmax, &trace.probs, pg);
            } else {
                grad = layer::backward(
                    &self.layers[i],
                    self.params[i].as_ref(),
                    input,
                    &trace.activations[i],
                    &grad,
                    trace.masks[i].as_deref(),
                    pg,
                );
            }
        }
        (grad, penultimate, param_grads)
    }

    /// Backward through the final affine layer, expanding the factored
    /// softmax-cross-entropy gradient.
    fn final_backward(
        &self,
        input: &Tensor,
        dense: &Tensor,
        softmax: Option<(usize, f64)>,
        probs: &[f64],
        param_grad: Option<&mut Params>,
    ) -> Tensor {
        let spec = &self.layers[self.layers.len() - 1];
        let params = self.params.last().and_then(|p| p.as_ref());
        let Some((target, scale)) = softmax else {
            return layer::backward(spec, params, input, input, dense, None, param_grad);
        };
        let p = params.expect("final affine params");
        let width = p.weight.shape()[1];
        let w = p.weight.data();
        let wt = &w[target * width..(target + 1) * width];
        // dense part
        let mut gx = layer::backward(spec, params, input, input, dense, None, None);
        let mut grouped = vec![0.0; width];
        for (k, &pk) in probs.iter().enumerate() {
            if k == target || pk == 0.0 {
                continue;
            }
            let wk = &w[k * width..(k + 1) * width];
            for ((acc, a), b) in grouped.iter_mut().zip(wk).zip(wt) {
                *acc += pk * (a - b);
            }
        }
        for (g, v) in gx.data_mut().iter_mut().zip(&grouped) {
            *g += scale * v;
        }
        if let Some(pg) = param_grad {
            let mut full = dense.clone();
            let off_target: f64 = probs.iter().enumerate().filter(|&(k, _)| k != target).map(|(_, p)| p).sum();
            for (k, g) in full.data_mut().iter_mut().enumerate() {
                *g += scale * if k == target { -off_target } else { probs[k] };
            }
            layer::backward(spec, params, input, input, &full, None, Some(pg));
        }
        gx
    }

    /// Composite loss value and its gradient with respect to the input (eval mode).
    pub fn grad_input(&self, x: &Tensor, loss: &LossSpec) -> Result<(f64, Tensor)> {
        let ev = self.evaluate_loss(x, loss, Mode::Eval, 0, false)?;
        Ok((ev.value, ev.input_grad))
    }

    /// Gradient of the composite loss with respect to the last hidden activation.
    pub fn grad_penultimate(&self, x: &Tensor, loss: &LossSpec) -> Result<Tensor> {
        if self.penultimate_layer().is_none() {
            return Err(Error::invalid("network has no hidden layer, so there is no penultimate activation"));
        }
        let ev = self.evaluate_loss(x, loss, Mode::Eval, 0, false)?;
        Ok(ev.penultimate_grad.expect("hidden layer exists"))
    }
}

fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::Shape(format!("invalid input shape {input_shape:?}")));
    }
    if num_classes == 0 {
        return Err(Error::invalid("num_classes must be positive"));
    }
    match layers.last() {
        Some(LayerSpec::Affine { outputs, .. }) if *outputs == num_classes => {}
        Some(other) => {
            return Err(Error::LayerShape {
                layer: layers.len() - 1,
                kind: other.name().into(),
                message: format!("final layer must be affine with {num_classes} outputs"),
            })
        }
        None => return Err(Error::invalid("network has no layers")),
    }
    let mut shapes = Vec::with_capacity(layers.len());
    let mut current = input_shape.to_vec();
    for (i, spec) in layers.iter().enumerate() {
        current = spec.output_shape(&current).map_err(|message| Error::LayerShape {
            layer: i,
            kind: spec.name().into(),
            message,
        })?;
        shapes.push(current.clone());
    }
    Ok(shapes)
}

/// Spatial mean per channel of a layer output; vectors pass through unchanged.
pub fn channel_mean_features(trace: &ForwardTrace, layer: usize) -> Result<Tensor> {
    Ok(channel_means(trace.activation(layer)?))
}

pub fn channel_means(act: &Tensor) -> Tensor {
    match act.shape() {
        [_] => act.clone(),
        [c, rest @ ..] => {
            let plane: usize = rest.iter().product();
            Tensor::vector(act.data().chunks(plane).take(*c).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect())
        }
        [] => unreachable!("tensors are never zero-dimensional"),
    }
}

/// Pulls a gradient on channel means back to the full activation shape.
pub fn channel_mean_backward(act_shape: &[usize], grad: &[f64]) -> Tensor {
    match act_shape {
        [_] => Tensor::vector(grad.to_vec()),
        [_, rest @ ..] => {
            let plane: usize = rest.iter().product();
            let data = grad.iter().flat_map(|g| std::iter::repeat_n(g / plane as f64, plane)).collect();
            Tensor::new(act_shape.to_vec(), data).expect("channel grad shape")
        }
        [] => unreachable!(),
    }
}
