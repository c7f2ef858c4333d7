//! Fixtures shared by the integration and acceptance targets.
#![allow(dead_code)]

pub mod props;

use ama_core::latent::{InterpPlan, SimplexConfig};
use ama_core::losses::{critic_pass, generator_pass, objective_value, LossWeights, StepBatch};
use ama_core::model::{ModelSpec, Networks};
use ama_core::ama_nn::{Activation, BatchNorm, Layer, Linear, Param, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Networks on 2x2 grayscale images with a 2-d code; every network has at
/// most 50 parameters.
pub fn tiny_networks(mirrored: bool, seed: u64) -> Networks<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = ModelSpec {
        image_shape: (1, 2, 2),
        latent_dim: 2,
        width: 1,
        residual: false,
        latent_norm: true,
        mirrored,
        leaky_slope: 0.2,
    };
    let encoder = Sequential::new(vec![
        Layer::Flatten,
        Layer::Linear(Linear::new(4, 3, false, &mut rng)),
        Layer::BatchNorm(BatchNorm::new(3)),
        Layer::Act(Activation::LeakyRelu(0.2)),
        Layer::Linear(Linear::new(3, 2, false, &mut rng)),
        Layer::BatchNorm(BatchNorm::plain(2)),
    ]);
    let generator = Sequential::new(vec![
        Layer::Linear(Linear::new(2, 3, false, &mut rng)),
        Layer::BatchNorm(BatchNorm::new(3)),
        Layer::Act(Activation::Relu),
        Layer::Linear(Linear::new(3, 4, false, &mut rng)),
        Layer::Act(Activation::Tanh),
        Layer::Unflatten([2, 2, 1]),
    ]);
    let pair = if mirrored { 8 } else { 4 };
    let body = Sequential::new(vec![
        Layer::Flatten,
        Layer::Linear(Linear::new(pair, 4, true, &mut rng)),
        Layer::Act(Activation::LeakyRelu(0.2)),
    ]);
    let head = Sequential::new(vec![Layer::Linear(Linear::new(4, 1, true, &mut rng))]);
    let mut nets = Networks::from_parts(spec, encoder, generator, body, head).unwrap();
    // nonzero biases keep exact-zero rows, and so activation kinks, out of the probes
    for net in [&mut nets.encoder.net, &mut nets.generator.net, &mut nets.critic.body, &mut nets.critic.head] {
        for p in net.params_mut() {
            if p.value.shape().len() == 1 {
                p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
    }
    nets
}

/// One combination of active objective terms.
#[derive(Clone, Copy, Debug)]
pub struct TermCase {
    pub name: &'static str,
    pub weights: LossWeights,
    pub interp: bool,
    pub neg: bool,
    pub mirrored: bool,
}

pub const TERM_CASES: [TermCase; 6] = [
    TermCase {
        name: "mirrored",
        weights: LossWeights {
            lambda_inter: 0.0,
            lambda_neg: 0.0,
            lambda_reg: 0.0,
        },
        interp: false,
        neg: false,
        mirrored: true,
    },
    TermCase {
        name: "mirrored+interp",
        weights: LossWeights {
            lambda_inter: 0.5,
            lambda_neg: 0.0,
            lambda_reg: 0.0,
        },
        interp: true,
        neg: false,
        mirrored: true,
    },
    TermCase {
        name: "mirrored+latent_reg",
        weights: LossWeights {
            lambda_inter: 0.0,
            lambda_neg: 0.0,
            lambda_reg: 1.0,
        },
        interp: false,
        neg: false,
        mirrored: true,
    },
    TermCase {
        name: "mirrored+neg",
        weights: LossWeights {
            lambda_inter: 0.0,
            lambda_neg: 5.0,
            lambda_reg: 0.0,
        },
        interp: false,
        neg: true,
        mirrored: true,
    },
    TermCase {
        name: "full",
        weights: LossWeights {
            lambda_inter: 0.5,
            lambda_neg: 5.0,
            lambda_reg: 1.0,
        },
        interp: true,
        neg: true,
        mirrored: true,
    },
    TermCase {
        name: "full, unpaired critic",
        weights: LossWeights {
            lambda_inter: 0.5,
            lambda_neg: 5.0,
            lambda_reg: 1.0,
        },
        interp: true,
        neg: true,
        mirrored: false,
    },
];

fn refresh(nets: &mut Networks<f64>) {
    nets.critic.body.refresh_spectral(false);
    nets.critic.head.refresh_spectral(false);
}

enum Group {
    Encoder,
    Generator,
    CriticBody,
    CriticHead,
}

fn params(nets: &mut Networks<f64>, g: &Group) -> Vec<*mut Param<f64>> {
    let v = match g {
        Group::Encoder => nets.encoder.net.params_mut(),
        Group::Generator => nets.generator.net.params_mut(),
        Group::CriticBody => nets.critic.body.params_mut(),
        Group::CriticHead => nets.critic.head.params_mut(),
    };
    v.into_iter().map(|p| p as *mut Param<f64>).collect()
}

fn grads(nets: &mut Networks<f64>, g: &Group) -> Vec<Vec<f64>> {
    params(nets, g)
        .into_iter()
        // SAFETY: the pointers come from a live exclusive borrow of `nets` and are used immediately
        .map(|p| unsafe { (*p).grad.data().to_vec() })
        .collect()
}

fn perturbed(nets: &Networks<f64>, g: &Group, pi: usize, j: usize, delta: f64) -> Networks<f64> {
    let mut n2 = nets.clone();
    let p = params(&mut n2, g)[pi];
    // SAFETY: as above
    unsafe { (*p).value.data_mut()[j] += delta };
    refresh(&mut n2);
    n2
}

/// Largest relative error between analytic and central-difference gradients
/// over the critic (of `-J`) and over encoder plus generator (of the
/// generator objective), with count of checked parameters.
pub fn gradient_errors(case: &TermCase, seed: u64) -> (f64, f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nets = tiny_networks(case.mirrored, seed);
    let b = 4;
    let batch = StepBatch {
        x: random(&[b, 2, 2, 1], &mut rng),
        interp: case.interp.then(|| InterpPlan::sample(b, &SimplexConfig::default(), &mut rng).unwrap()),
        z_neg: case.neg.then(|| random(&[b, 2], &mut rng)),
    };
    let w = case.weights;
    let h = 1e-6;
    let rel = |a: f64, b: f64| {
        let diff = (a - b).abs();
        if diff < 1e-9 {
            0.0
        } else {
            diff / a.abs().max(b.abs())
        }
    };
    let mut checked = 0;

    let mut work = nets.clone();
    critic_pass(&mut work, &batch, &w).unwrap();
    let mut critic_err: f64 = 0.0;
    for g in [Group::CriticBody, Group::CriticHead] {
        let analytic = grads(&mut work, &g);
        for (pi, a) in analytic.iter().enumerate() {
            for (j, &an) in a.iter().enumerate() {
                let value = |d: f64| -objective_value(&mut perturbed(&nets, &g, pi, j, d), &batch, &w).unwrap().critic_total;
                let fd = (value(h) - value(-h)) / (2.0 * h);
                critic_err = critic_err.max(rel(fd, an));
                checked += 1;
            }
        }
    }

    let mut work = nets.clone();
    generator_pass(&mut work, &batch, &w).unwrap();
    let mut gen_err: f64 = 0.0;
    for g in [Group::Encoder, Group::Generator] {
        let analytic = grads(&mut work, &g);
        for (pi, a) in analytic.iter().enumerate() {
            for (j, &an) in a.iter().enumerate() {
                let value = |d: f64| objective_value(&mut perturbed(&nets, &g, pi, j, d), &batch, &w).unwrap().gen_total;
                let fd = (value(h) - value(-h)) / (2.0 * h);
                gen_err = gen_err.max(rel(fd, an));
                checked += 1;
            }
        }
    }
    let _ = &mut nets;
    (critic_err, gen_err, checked)
}
