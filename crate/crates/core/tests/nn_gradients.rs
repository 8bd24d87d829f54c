//! Finite-difference checks of input and parameter gradients.

use std::sync::Arc;

use advlab::nn::{LayerSpec, LossSpec, MeanActivation, Mode, Network, Params};
use advlab::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv_net(seed: u64) -> Network {
    Network::new(
        vec![1, 6, 6],
        vec![
            LayerSpec::Conv2d { in_channels: 1, out_channels: 3, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::AvgPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Affine { inputs: 27, outputs: 5 },
            LayerSpec::Relu,
            LayerSpec::Affine { inputs: 5, outputs: 3 },
        ],
        3,
        seed,
    )
    .unwrap()
}

fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn loss_value(net: &Network, x: &Tensor, loss: &LossSpec) -> f64 {
    net.evaluate_loss(x, loss, Mode::Eval, 0, false).unwrap().value
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
}

#[test]
fn input_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let net = conv_net(trial);
        let x = random_input(&[1, 6, 6], &mut rng);
        for loss in [
            LossSpec::cross_entropy(1),
            LossSpec::cw_margin(2, 0.5),
            LossSpec::cross_entropy(0).with_extra(0.7, Arc::new(MeanActivation { layer: 1, sign: -1.0 })),
        ] {
            let (_, g) = net.grad_input(&x, &loss).unwrap();
            let h = 1e-6;
            for i in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (loss_value(&net, &xp, &loss) - loss_value(&net, &xm, &loss)) / (2.0 * h);
                let an = g.data()[i];
                assert!(
                    (fd - an).abs() < 1e-6 || rel_err(fd, an) < 1e-4,
                    "trial {trial} pixel {i}: fd {fd} vs analytic {an}"
                );
            }
        }
    }
}

#[test]
fn parameter_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = conv_net(3);
    let x = random_input(&[1, 6, 6], &mut rng);
    let loss = LossSpec::cross_entropy(2);
    let ev = net.evaluate_loss(&x, &loss, Mode::Eval, 0, true).unwrap();
    let grads = ev.param_grads.unwrap();
    let h = 1e-6;
    for (layer, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for (is_bias, count) in [(false, g.weight.len()), (true, g.bias.len())] {
            for j in 0..count {
                let perturbed = |delta: f64| {
                    let mut params: Vec<Option<Params>> = net.params().to_vec();
                    let p = params[layer].as_mut().unwrap();
                    let t = if is_bias { &mut p.bias } else { &mut p.weight };
                    t.data_mut()[j] += delta;
                    let n = Network::from_parts(net.input_shape().to_vec(), net.layers().to_vec(), params, 3).unwrap();
                    loss_value(&n, &x, &loss)
                };
                let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                let an = if is_bias { g.bias.data()[j] } else { g.weight.data()[j] };
                assert!(
                    (fd - an).abs() < 1e-6 || rel_err(fd, an) < 1e-4,
                    "layer {layer} {} {j}: fd {fd} vs analytic {an}",
                    if is_bias { "bias" } else { "weight" }
                );
            }
        }
    }
}
