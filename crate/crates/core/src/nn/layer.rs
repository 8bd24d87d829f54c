//! Layer definitions and their forward/backward kernels.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// One layer of a feedforward network.
///
/// Image tensors use `[channels, height, width]` layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Affine {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    AvgPool2d {
        size: usize,
    },
    Flatten,
    Dropout {
        rate: f64,
    },
}

fn one() -> usize {
    1
}

/// Trainable parameters of an affine or convolutional layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// `[outputs, inputs]` for affine, `[out_ch, in_ch, k, k]` for conv.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Params {
    pub(crate) fn zeros_like(&self) -> Params {
        Params { weight: Tensor::zeros(self.weight.shape()), bias: Tensor::zeros(self.bias.shape()) }
    }

    pub(crate) fn add_scaled(&mut self, other: &Params, scale: f64) {
        self.weight.add_scaled(&other.weight, scale);
        self.bias.add_scaled(&other.bias, scale);
    }
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Affine { .. } => "affine",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::AvgPool2d { .. } => "avgpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dropout { .. } => "dropout",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Affine { .. } | LayerSpec::Conv2d { .. })
    }

    /// Output shape for a given input shape, or a message describing the mismatch.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Affine { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err("affine widths must be positive".into());
                }
                if input != [inputs] {
                    return Err(format!("expects input [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err("conv2d sizes must be positive".into());
                }
                let &[c, h, w] = input else {
                    return Err(format!("expects [C,H,W] input, got {input:?}"));
                };
                if c != in_channels {
                    return Err(format!("expects {in_channels} input channels, got {c}"));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(format!("kernel {kernel} larger than padded input {h}x{w}"));
                }
                Ok(vec![out_channels, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1])
            }
            LayerSpec::AvgPool2d { size } => {
                let &[c, h, w] = input else {
                    return Err(format!("expects [C,H,W] input, got {input:?}"));
                };
                if size == 0 || h < size || w < size {
                    return Err(format!("pool size {size} invalid for {h}x{w}"));
                }
                Ok(vec![c, h / size, w / size])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(format!("dropout rate {rate} outside [0,1)"));
                }
                Ok(input.to_vec())
            }
        }
    }

    pub(crate) fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Affine { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d { in_channels, out_channels, kernel, .. } => {
                Some((vec![out_channels, in_channels, kernel, kernel], vec![out_channels]))
            }
            _ => None,
        }
    }

    /// He-normal weights, zero biases.
    pub(crate) fn init_params(&self, rng: &mut impl Rng) -> Option<Params> {
        let (wshape, bshape) = self.param_shapes()?;
        let fan_in: usize = wshape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let mut weight = Tensor::zeros(&wshape);
        for w in weight.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *w = std * z;
        }
        Some(Params { weight, bias: Tensor::zeros(&bshape) })
    }
}

/// Forward kernel. `mask` carries the inverted-dropout multipliers in train mode.
pub(crate) fn forward(
    spec: &LayerSpec,
    params: Option<&Params>,
    x: &Tensor,
    out_shape: &[usize],
    mask: Option<&[f64]>,
) -> Tensor {
    match *spec {
        LayerSpec::Affine { inputs, outputs } => {
            let p = params.expect("affine params");
            let w = p.weight.data();
            let b = p.bias.data();
            let xd = x.data();
            let out = (0..outputs)
                .map(|k| {
                    let row = &w[k * inputs..(k + 1) * inputs];
                    row.iter().zip(xd).map(|(a, v)| a * v).sum::<f64>() + b[k]
                })
                .collect();
            Tensor::new(out_shape.to_vec(), out).expect("affine output shape")
        }
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let p = params.expect("conv params");
            conv_forward(x, &p.weight, &p.bias, in_channels, out_channels, kernel, stride, padding, out_shape)
        }
        LayerSpec::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        LayerSpec::AvgPool2d { size } => pool_forward(x, size, out_shape),
        LayerSpec::Flatten => x.clone().reshaped(out_shape.to_vec()).expect("flatten"),
        LayerSpec::Dropout { .. } => match mask {
            Some(m) => {
                let mut y = x.clone();
                for (v, s) in y.data_mut().iter_mut().zip(m) {
                    *v *= s;
                }
                y
            }
            None => x.clone(),
        },
    }
}

/// Backward kernel: returns the gradient with respect to the layer input and
/// accumulates parameter gradients into `param_grad` when given.
pub(crate) fn backward(
    spec: &LayerSpec,
    params: Option<&Params>,
    input: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
    mask: Option<&[f64]>,
    param_grad: Option<&mut Params>,
) -> Tensor {
    match *spec {
        LayerSpec::Affine { inputs, outputs } => {
            let p = params.expect("affine params");
            let w = p.weight.data();
            let g = grad_out.data();
            let mut gx = vec![0.0; inputs];
            for k in 0..outputs {
                let gk = g[k];
                if gk == 0.0 {
                    continue;
                }
                let row = &w[k * inputs..(k + 1) * inputs];
                for (acc, wv) in gx.iter_mut().zip(row) {
                    *acc += wv * gk;
                }
            }
            if let Some(pg) = param_grad {
                let xd = input.data();
                let gw = pg.weight.data_mut();
                for k in 0..outputs {
                    let gk = g[k];
                    if gk == 0.0 {
                        continue;
                    }
                    for (acc, xv) in gw[k * inputs..(k + 1) * inputs].iter_mut().zip(xd) {
                        *acc += gk * xv;
                    }
                }
                for (acc, gk) in pg.bias.data_mut().iter_mut().zip(g) {
                    *acc += gk;
                }
            }
            Tensor::new(input.shape().to_vec(), gx).expect("affine grad shape")
        }
        LayerSpec::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
            let p = params.expect("conv params");
            conv_backward(input, &p.weight, grad_out, in_channels, out_channels, kernel, stride, padding, param_grad)
        }
        LayerSpec::Relu => {
            let mut gx = grad_out.clone();
            for (g, y) in gx.data_mut().iter_mut().zip(output.data()) {
                if *y <= 0.0 {
                    *g = 0.0;
                }
            }
            gx
        }
        LayerSpec::AvgPool2d { size } => pool_backward(input.shape(), grad_out, size),
        LayerSpec::Flatten => grad_out.clone().reshaped(input.shape().to_vec()).expect("flatten grad"),
        LayerSpec::Dropout { .. } => match mask {
            Some(m) => {
                let mut gx = grad_out.clone();
                for (g, s) in gx.data_mut().iter_mut().zip(m) {
                    *g *= s;
                }
                gx
            }
            None => grad_out.clone(),
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_shape: &[usize],
) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![0.0; cout * ho * wo];
    for o in 0..cout {
        let plane = &mut out[o * ho * wo..(o + 1) * ho * wo];
        plane.iter_mut().for_each(|v| *v = bias.data()[o]);
        for c in 0..cin {
            let xplane = &xd[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let wv = wd[((o * cin + c) * k + ki) * k + kj];
                    for i in 0..ho {
                        let r = (i * stride + ki) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[r as usize * w..(r as usize + 1) * w];
                        let orow = &mut plane[i * wo..(i + 1) * wo];
                        for (j, ov) in orow.iter_mut().enumerate() {
                            let col = (j * stride + kj) as isize - pad as isize;
                            if col >= 0 && col < w as isize {
                                *ov += wv * xrow[col as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    mut param_grad: Option<&mut Params>,
) -> Tensor {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (ho, wo) = (grad_out.shape()[1], grad_out.shape()[2]);
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let mut gx = vec![0.0; cin * h * w];
    for o in 0..cout {
        let gplane = &gd[o * ho * wo..(o + 1) * ho * wo];
        if let Some(pg) = param_grad.as_deref_mut() {
            pg.bias.data_mut()[o] += gplane.iter().sum::<f64>();
        }
        for c in 0..cin {
            let xplane = &xd[c * h * w..(c + 1) * h * w];
            let gxplane = &mut gx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let widx = ((o * cin + c) * k + ki) * k + kj;
                    let wv = wd[widx];
                    let mut gw = 0.0;
                    for i in 0..ho {
                        let r = (i * stride + ki) as isize - pad as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        let r = r as usize;
                        for j in 0..wo {
                            let col = (j * stride + kj) as isize - pad as isize;
                            if col < 0 || col >= w as isize {
                                continue;
                            }
                            let g = gplane[i * wo + j];
                            let idx = r * w + col as usize;
                            gxplane[idx] += wv * g;
                            gw += g * xplane[idx];
                        }
                    }
                    if let Some(pg) = param_grad.as_deref_mut() {
                        pg.weight.data_mut()[widx] += gw;
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gx).expect("conv grad shape")
}

fn pool_forward(x: &Tensor, size: usize, out_shape: &[usize]) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let scale = 1.0 / (size * size) as f64;
    let xd = x.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for di in 0..size {
                    for dj in 0..size {
                        s += xd[ch * h * w + (i * size + di) * w + j * size + dj];
                    }
                }
                out[(ch * ho + i) * wo + j] = s * scale;
            }
        }
    }
    Tensor::new(out_shape.to_vec(), out).expect("pool output shape")
}

fn pool_backward(in_shape: &[usize], grad_out: &Tensor, size: usize) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (grad_out.shape()[1], grad_out.shape()[2]);
    let scale = 1.0 / (size * size) as f64;
    let gd = grad_out.data();
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let g = gd[(ch * ho + i) * wo + j] * scale;
                for di in 0..size {
                    for dj in 0..size {
                        gx[ch * h * w + (i * size + di) * w + j * size + dj] += g;
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), gx).expect("pool grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shapes() {
        let conv = LayerSpec::Conv2d { in_channels: 1, out_channels: 4, kernel: 3, stride: 1, padding: 1 };
        assert_eq!(conv.output_shape(&[1, 8, 8]).unwrap(), vec![4, 8, 8]);
        assert!(conv.output_shape(&[2, 8, 8]).is_err());
        let strided = LayerSpec::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 2, padding: 0 };
        assert_eq!(strided.output_shape(&[1, 9, 9]).unwrap(), vec![2, 4, 4]);
    }

    #[test]
    fn dropout_rate_must_be_below_one() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.output_shape(&[4]).is_err());
        assert!(LayerSpec::Dropout { rate: 0.5 }.output_shape(&[4]).is_ok());
    }

    #[test]
    fn pool_averages_blocks() {
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = pool_forward(&x, 2, &[1, 1, 1]);
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn conv_matches_naive_single_output() {
        // 1x3x3 input, 1x1x2x2 kernel, no padding
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let p = Params {
            weight: Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap(),
            bias: Tensor::vector(vec![0.5]),
        };
        let spec = LayerSpec::Conv2d { in_channels: 1, out_channels: 1, kernel: 2, stride: 1, padding: 0 };
        let y = forward(&spec, Some(&p), &x, &[1, 2, 2], None);
        // x[i][j] - x[i+1][j+1] + 0.5 = -4 + 0.5
        assert_eq!(y.data(), &[-3.5; 4]);
    }
}
