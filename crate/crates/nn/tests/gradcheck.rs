use ama_nn::{Activation, BatchNorm, Backward, Conv2d, ConvTranspose2d, Layer, Linear, Mode, Residual, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// loss = <probe, net(x)> evaluated in training mode on a throwaway copy, so
/// running statistics do not drift between evaluations.
fn loss(net: &Sequential<f64>, x: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    let mut copy = net.clone();
    let (y, _) = copy.forward(x, Mode::Train);
    y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

fn check(mut net: Sequential<f64>, x: Tensor<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (y, trace) = net.forward(&x, Mode::Train);
    let probe = random(y.shape(), &mut rng);
    let dx = net.backward(trace, probe.clone(), Backward::ALL).unwrap();

    let h = 1e-6;
    // absolute floor covers gradients that are exactly zero (e.g. a bias feeding batch norm)
    let rel = |a: f64, b: f64| {
        let diff = (a - b).abs();
        if diff < 1e-8 { 0.0 } else { diff / a.abs().max(b.abs()) }
    };

    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (loss(&net, &xp, &probe) - loss(&net, &xm, &probe)) / (2.0 * h);
        assert!(rel(fd, dx.data()[i]) < 1e-5, "input {i}: fd {fd} vs {}", dx.data()[i]);
    }

    let grads: Vec<Vec<f64>> = net.params_mut().iter().map(|p| p.grad.data().to_vec()).collect();
    let nparams = grads.len();
    for pi in 0..nparams {
        for j in 0..grads[pi].len() {
            let eval = |delta: f64| {
                let mut n2 = net.clone();
                n2.params_mut()[pi].value.data_mut()[j] += delta;
                // spectral vectors stay fixed; only sigma and W/sigma follow the weight
                n2.refresh_spectral(false);
                loss(&n2, &x, &probe)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(rel(fd, grads[pi][j]) < 1e-5, "param {pi}[{j}]: fd {fd} vs {}", grads[pi][j]);
        }
    }
}

#[test]
fn conv_stack_with_spectral_norm_and_batch_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Sequential::new(vec![
        Layer::Conv(Conv2d::new(2, 3, 3, 2, 1, true, &mut rng)),
        Layer::BatchNorm(BatchNorm::new(3)),
        Layer::Act(Activation::LeakyRelu(0.2)),
        Layer::Conv(Conv2d::new(3, 2, 2, 1, 0, true, &mut rng)),
        Layer::SumPool,
        Layer::Linear(Linear::new(2, 1, true, &mut rng)),
    ]);
    let x = random(&[3, 5, 5, 2], &mut rng);
    check(net, x, 2);
}

#[test]
fn generator_style_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Sequential::new(vec![
        Layer::Linear(Linear::new(3, 2 * 2 * 2, false, &mut rng)),
        Layer::Unflatten([2, 2, 2]),
        Layer::BatchNorm(BatchNorm::new(2)),
        Layer::Act(Activation::Relu),
        Layer::ConvTranspose(ConvTranspose2d::new(2, 2, 3, 2, 1, &mut rng)),
        Layer::Act(Activation::Tanh),
        Layer::ConvTranspose(ConvTranspose2d::new(2, 1, 4, 2, 1, &mut rng)),
        Layer::Flatten,
    ]);
    let x = random(&[4, 3], &mut rng);
    check(net, x, 4);
}

#[test]
fn residual_blocks_with_pooling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let down = Residual {
        main: Sequential::new(vec![
            Layer::Act(Activation::Relu),
            Layer::Conv(Conv2d::new(2, 2, 3, 1, 1, true, &mut rng)),
            Layer::AvgPool2,
        ]),
        shortcut: Sequential::new(vec![
            Layer::Conv(Conv2d::new(2, 2, 1, 1, 0, true, &mut rng)),
            Layer::AvgPool2,
        ]),
    };
    let up = Residual {
        main: Sequential::new(vec![
            Layer::Upsample2,
            Layer::Conv(Conv2d::new(2, 2, 3, 1, 1, false, &mut rng)),
        ]),
        shortcut: Sequential::new(vec![Layer::Upsample2]),
    };
    let net = Sequential::new(vec![
        Layer::Residual(Box::new(down)),
        Layer::Residual(Box::new(up)),
        Layer::Act(Activation::Tanh),
    ]);
    let x = random(&[2, 4, 4, 2], &mut rng);
    check(net, x, 6);
}
