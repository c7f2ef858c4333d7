//! Encoder, generator and pair critic behind shape-checked interfaces.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use ama_nn::{
    top_singular_value, Activation, BatchNorm, Conv2d, ConvTranspose2d, Layer, Linear, Mode, Residual, Scalar,
    Sequential, Tensor,
};

use crate::data::ImageBatch;
use crate::latent::LatentBatch;
use crate::{AmaError, Result};

/// Architecture hyperparameters shared by the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `(C, H, W)` of the images.
    pub image_shape: (usize, usize, usize),
    pub latent_dim: usize,
    /// Base channel count.
    pub width: usize,
    pub residual: bool,
    /// Batch-standardizes the encoder output without affine parameters.
    pub latent_norm: bool,
    /// Critic sees channel-stacked pairs; otherwise only the second image.
    pub mirrored: bool,
    pub leaky_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub input_shape: (usize, usize, usize),
    pub latent_dim: usize,
    pub width_multiplier: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub output_shape: (usize, usize, usize),
    pub width_multiplier: usize,
    pub residual: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lipschitz {
    SpectralNorm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    /// `(2C, H, W)` for mirrored pairs, `(C, H, W)` otherwise.
    pub input_shape: (usize, usize, usize),
    pub width_multiplier: usize,
    pub residual: bool,
    pub lipschitz: Lipschitz,
    pub mirrored: bool,
}

impl ModelSpec {
    pub fn encoder(&self) -> EncoderSpec {
        EncoderSpec {
            input_shape: self.image_shape,
            latent_dim: self.latent_dim,
            width_multiplier: self.width,
        }
    }

    pub fn generator(&self) -> GeneratorSpec {
        GeneratorSpec {
            latent_dim: self.latent_dim,
            output_shape: self.image_shape,
            width_multiplier: self.width,
            residual: self.residual,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorSpec {
        let (c, h, w) = self.image_shape;
        DiscriminatorSpec {
            input_shape: (if self.mirrored { 2 * c } else { c }, h, w),
            width_multiplier: self.width,
            residual: self.residual,
            lipschitz: Lipschitz::SpectralNorm,
            mirrored: self.mirrored,
        }
    }

    fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image_shape;
        if c == 0 || self.latent_dim == 0 || self.width == 0 {
            return Err(AmaError::contract("channels, latent_dim and width must be positive"));
        }
        if h != w || h < 8 {
            return Err(AmaError::contract(format!("square images of side >= 8 are required, got {h}x{w}")));
        }
        if self.residual && residual_stages(h).is_none() {
            return Err(AmaError::contract(format!("side {h} cannot be built from 2x upsampling stages")));
        }
        Ok(())
    }
}

/// Spatial sides visited by three stride-2 stages: `[s, ceil(s/2), ...]`.
fn halvings(side: usize) -> [usize; 4] {
    let mut s = [side; 4];
    for i in 1..4 {
        s[i] = s[i - 1].div_ceil(2);
    }
    s
}

/// `(base side, number of 2x stages)` for the residual networks.
fn residual_stages(side: usize) -> Option<(usize, usize)> {
    let mut base = side;
    let mut n = 0;
    while n < 3 && base % 2 == 0 && base / 2 >= 4 {
        base /= 2;
        n += 1;
    }
    (n > 0).then_some((base, n))
}

/// Kernel for a stride-2, pad-1 layer that maps side `s` to `ceil(s/2)`.
fn down_kernel(s: usize) -> usize {
    if s % 2 == 0 {
        4
    } else {
        3
    }
}

fn build_encoder<T: Scalar>(spec: &ModelSpec, rng: &mut impl Rng) -> Sequential<T> {
    let (c, h, _) = spec.image_shape;
    let s = halvings(h);
    let w = spec.width;
    let chans = [c, w, 2 * w, 4 * w];
    let mut layers = Vec::new();
    for i in 0..3 {
        layers.push(Layer::Conv(Conv2d::new(chans[i], chans[i + 1], down_kernel(s[i]), 2, 1, false, rng)));
        layers.push(Layer::BatchNorm(BatchNorm::new(chans[i + 1])));
        layers.push(Layer::Act(Activation::LeakyRelu(spec.leaky_slope)));
    }
    layers.push(Layer::Conv(Conv2d::new(4 * w, spec.latent_dim, s[3], 1, 0, false, rng)));
    layers.push(Layer::Flatten);
    if spec.latent_norm {
        layers.push(Layer::BatchNorm(BatchNorm::plain(spec.latent_dim)));
    }
    Sequential::new(layers)
}

fn build_generator<T: Scalar>(spec: &ModelSpec, rng: &mut impl Rng) -> Sequential<T> {
    let (c, h, _) = spec.image_shape;
    let w = spec.width;
    let d = spec.latent_dim;
    if spec.residual {
        let (base, n) = residual_stages(h).expect("validated");
        let ch = 2 * w;
        let mut layers = vec![
            Layer::Linear(Linear::new(d, base * base * ch, false, rng)),
            Layer::Unflatten([base, base, ch]),
        ];
        for _ in 0..n {
            let main = Sequential::new(vec![
                Layer::BatchNorm(BatchNorm::new(ch)),
                Layer::Act(Activation::Relu),
                Layer::Upsample2,
                Layer::Conv(Conv2d::new(ch, ch, 3, 1, 1, false, rng)),
                Layer::BatchNorm(BatchNorm::new(ch)),
                Layer::Act(Activation::Relu),
                Layer::Conv(Conv2d::new(ch, ch, 3, 1, 1, false, rng)),
            ]);
            let shortcut = Sequential::new(vec![Layer::Upsample2, Layer::Conv(Conv2d::new(ch, ch, 1, 1, 0, false, rng))]);
            layers.push(Layer::Residual(Box::new(Residual { main, shortcut })));
        }
        layers.extend([
            Layer::BatchNorm(BatchNorm::new(ch)),
            Layer::Act(Activation::Relu),
            Layer::Conv(Conv2d::new(ch, c, 3, 1, 1, false, rng)),
            Layer::Act(Activation::Tanh),
        ]);
        return Sequential::new(layers);
    }
    let s = halvings(h);
    let chans = [c, w, 2 * w, 4 * w];
    let mut layers = vec![
        Layer::Linear(Linear::new(d, s[3] * s[3] * 4 * w, false, rng)),
        Layer::Unflatten([s[3], s[3], 4 * w]),
        Layer::BatchNorm(BatchNorm::new(4 * w)),
        Layer::Act(Activation::Relu),
    ];
    for i in (0..3).rev() {
        // (u - 1) * 2 - 2 + k equals s[i] for k = 4 (even) or 3 (odd)
        let k = if s[i] == 2 * s[i + 1] { 4 } else { 3 };
        layers.push(Layer::ConvTranspose(ConvTranspose2d::new(chans[i + 1], chans[i], k, 2, 1, rng)));
        if i > 0 {
            layers.push(Layer::BatchNorm(BatchNorm::new(chans[i])));
            layers.push(Layer::Act(Activation::Relu));
        }
    }
    layers.push(Layer::Act(Activation::Tanh));
    Sequential::new(layers)
}

fn build_critic<T: Scalar>(spec: &ModelSpec, rng: &mut impl Rng) -> (Sequential<T>, Sequential<T>) {
    let (cin, h, _) = spec.discriminator().input_shape;
    let w = spec.width;
    let act = Activation::LeakyRelu(spec.leaky_slope);
    if spec.residual {
        let (_, n) = residual_stages(h).expect("validated");
        let ch = w;
        let mut layers = Vec::new();
        for b in 0..n.min(2) {
            let (inc, pre) = if b == 0 { (cin, vec![]) } else { (ch, vec![Layer::Act(Activation::Relu)]) };
            let mut main = pre;
            main.extend([
                Layer::Conv(Conv2d::new(inc, ch, 3, 1, 1, true, rng)),
                Layer::Act(Activation::Relu),
                Layer::Conv(Conv2d::new(ch, ch, 3, 1, 1, true, rng)),
                Layer::AvgPool2,
            ]);
            let shortcut = vec![Layer::Conv(Conv2d::new(inc, ch, 1, 1, 0, true, rng)), Layer::AvgPool2];
            layers.push(Layer::Residual(Box::new(Residual {
                main: Sequential::new(main),
                shortcut: Sequential::new(shortcut),
            })));
        }
        for _ in 0..2 {
            let main = Sequential::new(vec![
                Layer::Act(Activation::Relu),
                Layer::Conv(Conv2d::new(ch, ch, 3, 1, 1, true, rng)),
                Layer::Act(Activation::Relu),
                Layer::Conv(Conv2d::new(ch, ch, 3, 1, 1, true, rng)),
            ]);
            layers.push(Layer::Residual(Box::new(Residual {
                main,
                shortcut: Sequential::default(),
            })));
        }
        layers.extend([Layer::Act(Activation::Relu), Layer::SumPool]);
        let head = Sequential::new(vec![Layer::Linear(Linear::new(ch, 1, true, rng))]);
        return (Sequential::new(layers), head);
    }
    let s = halvings(h);
    let chans = [cin, w, 2 * w, 4 * w];
    let mut layers = Vec::new();
    for i in 0..3 {
        layers.push(Layer::Conv(Conv2d::new(chans[i], chans[i + 1], down_kernel(s[i]), 2, 1, true, rng)));
        layers.push(Layer::Act(act));
    }
    layers.push(Layer::SumPool);
    let head = Sequential::new(vec![Layer::Linear(Linear::new(4 * w, 1, true, rng))]);
    (Sequential::new(layers), head)
}

fn contains_batch_norm<T>(net: &Sequential<T>) -> bool {
    net.layers.iter().any(|l| match l {
        Layer::BatchNorm(_) => true,
        Layer::Residual(r) => contains_batch_norm(&r.main) || contains_batch_norm(&r.shortcut),
        _ => false,
    })
}

fn check_image_shape<T: Scalar>(t: &Tensor<T>, expected: (usize, usize, usize), what: &str) -> Result<()> {
    if t.shape().len() != 4 {
        return Err(AmaError::contract(format!("{what} expects rank-4 images, got {:?}", t.shape())));
    }
    let [_, h, w, c] = t.dims4();
    if (c, h, w) != expected {
        return Err(AmaError::contract(format!(
            "{what} expects (C,H,W) = {expected:?}, got ({c}, {h}, {w})"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub spec: EncoderSpec,
    pub net: Sequential<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Evaluation-mode codes `[batch, d]`.
    pub fn encode(&self, x: &ImageBatch<T>) -> Result<LatentBatch<T>> {
        check_image_shape(&x.tensor, self.spec.input_shape, "encoder")?;
        let z = self.net.infer(&x.tensor);
        if z.shape() != [x.len(), self.spec.latent_dim] {
            return Err(AmaError::contract(format!("encoder produced {:?}", z.shape())));
        }
        LatentBatch::new(z)
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub spec: GeneratorSpec,
    pub net: Sequential<T>,
}

impl<T: Scalar> Generator<T> {
    /// Evaluation-mode images in `[-1, 1]`.
    pub fn decode(&self, z: &LatentBatch<T>) -> Result<ImageBatch<T>> {
        if z.dim() != self.spec.latent_dim {
            return Err(AmaError::contract(format!(
                "generator expects {}-dimensional codes, got {}",
                self.spec.latent_dim,
                z.dim()
            )));
        }
        let x = self.net.infer(&z.codes);
        check_image_shape(&x, self.spec.output_shape, "generator output")?;
        ImageBatch::new(x)
    }
}

/// Penultimate critic activations, `[batch, feature_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairFeatures<T> {
    pub features: Tensor<T>,
}

/// Pair critic: `body` ends in the sum-pooled feature vector, `head` is the
/// scalar projection.
#[derive(Clone, Debug)]
pub struct Critic<T> {
    pub spec: DiscriminatorSpec,
    pub body: Sequential<T>,
    pub head: Sequential<T>,
}

impl<T: Scalar> Critic<T> {
    /// Critic input for the pair `(a, b)`: channel-stacked when mirrored,
    /// otherwise `b` alone.
    pub fn pair_input(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(AmaError::contract(format!("pair shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(if self.spec.mirrored { Tensor::concat_channels(a, b) } else { b.clone() })
    }

    /// Scores an already stacked input.
    pub fn discriminate(&self, input: &Tensor<T>) -> Result<(Vec<T>, PairFeatures<T>)> {
        check_image_shape(input, self.spec.input_shape, "critic")?;
        let features = self.body.infer(input);
        let out = self.head.infer(&features);
        Ok((out.into_data(), PairFeatures { features }))
    }

    pub fn discriminate_pair(&self, a: &ImageBatch<T>, b: &ImageBatch<T>) -> Result<(Vec<T>, PairFeatures<T>)> {
        self.discriminate(&self.pair_input(&a.tensor, &b.tensor)?)
    }

    /// Top singular value of every normalized weight, by a fresh power iteration.
    pub fn spectral_norms(&self, iters: usize) -> Vec<f64> {
        self.body
            .effective_weights()
            .into_iter()
            .chain(self.head.effective_weights())
            .map(|(r, c, w)| top_singular_value(&w, r, c, iters))
            .collect()
    }
}

/// The three networks of one model plus their current mode.
#[derive(Clone, Debug)]
pub struct Networks<T> {
    pub spec: ModelSpec,
    pub encoder: Encoder<T>,
    pub generator: Generator<T>,
    pub critic: Critic<T>,
    mode: Mode,
}

impl<T: Scalar> Networks<T> {
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let e = build_encoder(&spec, rng);
        let g = build_generator(&spec, rng);
        let (body, head) = build_critic(&spec, rng);
        Self::from_parts(spec, e, g, body, head)
    }

    /// Wraps hand-built networks; the critic must not use batch statistics.
    pub fn from_parts(
        spec: ModelSpec,
        encoder: Sequential<T>,
        generator: Sequential<T>,
        critic_body: Sequential<T>,
        critic_head: Sequential<T>,
    ) -> Result<Self> {
        if contains_batch_norm(&critic_body) || contains_batch_norm(&critic_head) {
            return Err(AmaError::contract("the critic must not contain batch normalization"));
        }
        Ok(Self {
            encoder: Encoder {
                spec: spec.encoder(),
                net: encoder,
            },
            generator: Generator {
                spec: spec.generator(),
                net: generator,
            },
            critic: Critic {
                spec: spec.discriminator(),
                body: critic_body,
                head: critic_head,
            },
            spec,
            mode: Mode::Train,
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn train(&mut self) {
        self.mode = Mode::Train;
    }

    /// Freezes normalization statistics for scoring.
    pub fn eval(&mut self) {
        self.mode = Mode::Eval;
    }

    pub fn require_eval(&self) -> Result<()> {
        if self.mode != Mode::Eval {
            return Err(AmaError::contract("scoring needs the networks in evaluation mode"));
        }
        Ok(())
    }

    pub fn param_counts(&mut self) -> (usize, usize, usize) {
        (
            self.encoder.net.param_count(),
            self.generator.net.param_count(),
            self.critic.body.param_count() + self.critic.head.param_count(),
        )
    }

    /// Named tensors covering weights, spectral vectors and running statistics.
    pub fn state(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.encoder.net.state("encoder.");
        out.extend(self.generator.net.state("generator."));
        out.extend(self.critic.body.state("critic.body."));
        out.extend(self.critic.head.state("critic.head."));
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor<T>>) -> Result<()> {
        let wrap = |r: std::result::Result<(), String>| r.map_err(AmaError::contract);
        wrap(self.encoder.net.load_state("encoder.", tensors))?;
        wrap(self.generator.net.load_state("generator.", tensors))?;
        wrap(self.critic.body.load_state("critic.body.", tensors))?;
        wrap(self.critic.head.load_state("critic.head.", tensors))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(side: usize, c: usize, residual: bool) -> ModelSpec {
        ModelSpec {
            image_shape: (c, side, side),
            latent_dim: 16,
            width: 4,
            residual,
            latent_norm: true,
            mirrored: true,
            leaky_slope: 0.2,
        }
    }

    fn images(n: usize, c: usize, side: usize, rng: &mut ChaCha8Rng) -> ImageBatch<f32> {
        let t = Tensor::from_vec(&[n, side, side, c], (0..n * side * side * c).map(|_| rng.random_range(-1.0..1.0)).collect());
        ImageBatch::new(t).unwrap()
    }

    #[test]
    fn shapes_for_28_and_32_pixel_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (side, c, residual) in [(28, 1, false), (32, 3, false), (32, 3, true), (28, 1, true)] {
            let nets: Networks<f32> = Networks::new(spec(side, c, residual), &mut rng).unwrap();
            let x = images(3, c, side, &mut rng);
            let z = nets.encoder.encode(&x).unwrap();
            assert_eq!(z.codes.shape(), &[3, 16]);
            let xr = nets.generator.decode(&z).unwrap();
            assert_eq!(xr.shape_bchw(), (3, c, side, side), "side {side} residual {residual}");
            assert!(xr.within_range());
            let (scores, f) = nets.critic.discriminate_pair(&x, &xr).unwrap();
            assert_eq!(scores.len(), 3);
            assert_eq!(f.features.batch(), 3);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nets: Networks<f32> = Networks::new(spec(28, 1, false), &mut rng).unwrap();
        let x = images(4, 1, 28, &mut rng);
        assert_eq!(nets.encoder.encode(&x).unwrap(), nets.encoder.encode(&x).unwrap());
        let a = nets.critic.discriminate_pair(&x, &x).unwrap();
        let b = nets.critic.discriminate_pair(&x, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatches_are_contract_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nets: Networks<f32> = Networks::new(spec(28, 1, false), &mut rng).unwrap();
        let wrong = images(2, 3, 28, &mut rng);
        assert!(matches!(nets.encoder.encode(&wrong), Err(AmaError::Contract(_))));
        let single = images(2, 1, 28, &mut rng).tensor;
        assert!(matches!(nets.critic.discriminate(&single), Err(AmaError::Contract(_))));
        let z = LatentBatch::new(Tensor::<f32>::zeros(&[2, 5])).unwrap();
        assert!(matches!(nets.generator.decode(&z), Err(AmaError::Contract(_))));
    }

    #[test]
    fn critic_weights_are_spectrally_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut nets: Networks<f64> = Networks::new(spec(28, 1, false), &mut rng).unwrap();
        for _ in 0..100 {
            nets.critic.body.refresh_spectral(true);
            nets.critic.head.refresh_spectral(true);
        }
        assert!(nets.critic.body.fully_spectral() && nets.critic.head.fully_spectral());
        for s in nets.critic.spectral_norms(500) {
            assert!(s <= 1.0 + 1e-3, "top singular value {s}");
        }
    }

    #[test]
    fn critic_with_batch_norm_is_rejected() {
        let s = spec(28, 1, false);
        let body = Sequential::<f32>::new(vec![Layer::BatchNorm(BatchNorm::new(2))]);
        let err = Networks::from_parts(s, Sequential::default(), Sequential::default(), body, Sequential::default());
        assert!(matches!(err, Err(AmaError::Contract(_))));
    }

    #[test]
    fn unmirrored_critic_takes_single_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = spec(28, 1, false);
        s.mirrored = false;
        let nets: Networks<f32> = Networks::new(s, &mut rng).unwrap();
        assert_eq!(nets.critic.spec.input_shape, (1, 28, 28));
        let x = images(2, 1, 28, &mut rng);
        let y = images(2, 1, 28, &mut rng);
        let (a, _) = nets.critic.discriminate_pair(&x, &y).unwrap();
        let (b, _) = nets.critic.discriminate_pair(&y, &y).unwrap();
        assert_eq!(a, b);
    }
}
