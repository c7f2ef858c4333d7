use std::collections::HashMap;

use crate::im2col::ConvGeometry;
use crate::layers::{
    avg_pool2, avg_pool2_backward, sum_pool, sum_pool_backward, upsample2, upsample2_backward,
    Activation, BatchNorm, BatchNormCache, Conv2d, ConvTranspose2d, Linear, Param,
};
use crate::{Scalar, Tensor};

/// Whether normalization layers use batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Which gradients a backward pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Backward {
    /// Accumulate parameter gradients.
    pub params: bool,
    /// Return the gradient with respect to the network input.
    pub input: bool,
}

impl Backward {
    pub const ALL: Backward = Backward { params: true, input: true };
    pub const PARAMS: Backward = Backward { params: true, input: false };
    pub const INPUT: Backward = Backward { params: false, input: true };
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    Linear(Linear<T>),
    BatchNorm(BatchNorm<T>),
    Act(Activation),
    /// `[n, h, w, c] -> [n, c]`
    SumPool,
    AvgPool2,
    Upsample2,
    /// `[n, f] -> [n, h, w, c]`
    Unflatten([usize; 3]),
    /// `[n, h, w, c] -> [n, h*w*c]`
    Flatten,
    Residual(Box<Residual<T>>),
}

/// `main(x) + shortcut(x)`; an empty shortcut is the identity.
#[derive(Clone, Debug)]
pub struct Residual<T> {
    pub main: Sequential<T>,
    pub shortcut: Sequential<T>,
}

#[derive(Clone, Debug)]
enum Saved<T> {
    Conv { cols: Vec<T>, geometry: ConvGeometry },
    ConvTranspose { input: Tensor<T>, geometry: ConvGeometry },
    Linear { input: Tensor<T> },
    BatchNorm(BatchNormCache<T>),
    Act { input: Tensor<T>, output: Tensor<T> },
    Shape(Vec<usize>),
    Residual(Box<(Trace<T>, Trace<T>)>),
}

/// Activations recorded by a training forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace<T> {
    saved: Vec<Saved<T>>,
}

/// An ordered stack of layers with explicit forward and backward passes.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, layer: Layer<T>) {
        self.layers.push(layer);
    }

    /// Forward pass that records what backward needs.
    ///
    /// In [`Mode::Train`] batch-norm layers normalize with batch statistics and
    /// update their running estimates.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Trace<T>) {
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (out, s) = match layer {
                Layer::Conv(conv) => {
                    let (y, cols, geometry) = conv.forward(&h);
                    (y, Saved::Conv { cols, geometry })
                }
                Layer::ConvTranspose(conv) => {
                    let (y, geometry) = conv.forward(&h);
                    (y, Saved::ConvTranspose { input: h, geometry })
                }
                Layer::Linear(lin) => {
                    let y = lin.forward(&h);
                    (y, Saved::Linear { input: h })
                }
                Layer::BatchNorm(bn) => {
                    let (y, cache) = bn.forward(&h, mode == Mode::Train);
                    (y, Saved::BatchNorm(cache))
                }
                Layer::Act(act) => {
                    let y = act.apply(&h);
                    (y.clone(), Saved::Act { input: h, output: y })
                }
                Layer::SumPool => (sum_pool(&h), Saved::Shape(h.shape().to_vec())),
                Layer::AvgPool2 => (avg_pool2(&h), Saved::Shape(h.shape().to_vec())),
                Layer::Upsample2 => (upsample2(&h), Saved::Shape(h.shape().to_vec())),
                Layer::Unflatten(tail) => {
                    let shape = h.shape().to_vec();
                    let n = h.batch();
                    (h.reshape(&[n, tail[0], tail[1], tail[2]]), Saved::Shape(shape))
                }
                Layer::Flatten => {
                    let shape = h.shape().to_vec();
                    let (n, len) = (h.batch(), h.row_len());
                    (h.reshape(&[n, len]), Saved::Shape(shape))
                }
                Layer::Residual(res) => {
                    let (mut a, ta) = res.main.forward(&h, mode);
                    let (b, tb) = res.shortcut.forward(&h, mode);
                    a.add_assign(&b);
                    (a, Saved::Residual(Box::new((ta, tb))))
                }
            };
            saved.push(s);
            h = out;
        }
        (h, Trace { saved })
    }

    /// Evaluation-mode forward: frozen normalization statistics, no recording,
    /// no mutation.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv(conv) => conv.forward(&h).0,
                Layer::ConvTranspose(conv) => conv.forward(&h).0,
                Layer::Linear(lin) => lin.forward(&h),
                Layer::BatchNorm(bn) => bn.infer(&h),
                Layer::Act(act) => act.apply(&h),
                Layer::SumPool => sum_pool(&h),
                Layer::AvgPool2 => avg_pool2(&h),
                Layer::Upsample2 => upsample2(&h),
                Layer::Unflatten(tail) => {
                    let n = h.batch();
                    h.reshape(&[n, tail[0], tail[1], tail[2]])
                }
                Layer::Flatten => {
                    let (n, len) = (h.batch(), h.row_len());
                    h.reshape(&[n, len])
                }
                Layer::Residual(res) => {
                    let mut a = res.main.infer(&h);
                    a.add_assign(&res.shortcut.infer(&h));
                    a
                }
            };
        }
        h
    }

    /// Runs layers `range` in evaluation mode.
    pub fn infer_range(&self, x: &Tensor<T>, range: std::ops::Range<usize>) -> Tensor<T> {
        let sub = Sequential {
            layers: self.layers[range].to_vec(),
        };
        sub.infer(x)
    }

    /// Backpropagates `grad` (w.r.t. the output of the traced forward pass).
    ///
    /// Returns the input gradient when `opts.input` is set. For an empty
    /// network the output gradient is returned unchanged.
    pub fn backward(&mut self, trace: Trace<T>, grad: Tensor<T>, opts: Backward) -> Option<Tensor<T>> {
        assert_eq!(trace.saved.len(), self.layers.len(), "trace does not belong to this network");
        let mut g = grad;
        let count = self.layers.len();
        for (i, (layer, saved)) in self.layers.iter_mut().zip(trace.saved).enumerate().rev() {
            let need_input = i > 0 || opts.input;
            let next = match (layer, saved) {
                (Layer::Conv(conv), Saved::Conv { cols, geometry }) => {
                    conv.backward(&cols, &geometry, &g, opts.params, need_input)
                }
                (Layer::ConvTranspose(conv), Saved::ConvTranspose { input, geometry }) => {
                    conv.backward(&input, &geometry, &g, opts.params, need_input)
                }
                (Layer::Linear(lin), Saved::Linear { input }) => lin.backward(&input, &g, opts.params, need_input),
                (Layer::BatchNorm(bn), Saved::BatchNorm(cache)) => Some(bn.backward(&cache, &g, opts.params)),
                (Layer::Act(act), Saved::Act { input, output }) => Some(act.backward(&input, &output, &g)),
                (Layer::SumPool, Saved::Shape(shape)) => Some(sum_pool_backward(&shape, &g)),
                (Layer::AvgPool2, Saved::Shape(shape)) => Some(avg_pool2_backward(&shape, &g)),
                (Layer::Upsample2, Saved::Shape(_)) => Some(upsample2_backward(&g)),
                (Layer::Unflatten(_) | Layer::Flatten, Saved::Shape(shape)) => Some(g.reshape(&shape)),
                (Layer::Residual(res), Saved::Residual(traces)) => {
                    let (ta, tb) = *traces;
                    let inner = Backward {
                        params: opts.params,
                        input: true,
                    };
                    let mut ga = res.main.backward(ta, g.clone(), inner).expect("input grad");
                    let gb = res.shortcut.backward(tb, g, inner).expect("input grad");
                    ga.add_assign(&gb);
                    Some(ga)
                }
                _ => unreachable!("trace entry does not match layer"),
            };
            match next {
                Some(n) => g = n,
                None => return None,
            }
        }
        if count == 0 && !opts.input {
            return None;
        }
        Some(g)
    }

    /// Mutable references to every trainable parameter in a stable order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    fn collect_params<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::ConvTranspose(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::Linear(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                Layer::BatchNorm(bn) if bn.affine => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Layer::Residual(r) => {
                    r.main.collect_params(out);
                    r.shortcut.collect_params(out);
                }
                _ => {}
            }
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Recomputes every spectrally normalized weight, optionally after one
    /// power-iteration step. Call after each parameter update.
    pub fn refresh_spectral(&mut self, power_iteration: bool) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    if let Some(sn) = c.spectral.as_mut() {
                        if power_iteration {
                            sn.power_iteration(c.weight.value.data());
                        }
                        sn.refresh(c.weight.value.data());
                    }
                }
                Layer::Linear(l) => {
                    if let Some(sn) = l.spectral.as_mut() {
                        if power_iteration {
                            sn.power_iteration(l.weight.value.data());
                        }
                        sn.refresh(l.weight.value.data());
                    }
                }
                Layer::Residual(r) => {
                    r.main.refresh_spectral(power_iteration);
                    r.shortcut.refresh_spectral(power_iteration);
                }
                _ => {}
            }
        }
    }

    /// Effective (post-normalization) weight matrices as `(rows, cols, data)`.
    pub fn effective_weights(&self) -> Vec<(usize, usize, Vec<T>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => out.push((
                    c.out_channels,
                    c.kernel * c.kernel * c.in_channels,
                    c.effective_weight().to_vec(),
                )),
                Layer::Linear(l) => out.push((l.out_features, l.in_features, l.effective_weight().to_vec())),
                Layer::Residual(r) => {
                    out.extend(r.main.effective_weights());
                    out.extend(r.shortcut.effective_weights());
                }
                _ => {}
            }
        }
        out
    }

    /// True when every conv and linear layer is spectrally normalized.
    pub fn fully_spectral(&self) -> bool {
        self.layers.iter().all(|layer| match layer {
            Layer::Conv(c) => c.spectral.is_some(),
            Layer::Linear(l) => l.spectral.is_some(),
            Layer::Residual(r) => r.main.fully_spectral() && r.shortcut.fully_spectral(),
            _ => true,
        })
    }

    /// All persistent state (parameters, running statistics, power-iteration
    /// vectors) as named tensors.
    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("{prefix}{i}.");
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("{p}weight"), c.weight.value.clone()));
                    out.push((format!("{p}bias"), c.bias.value.clone()));
                    if let Some(sn) = &c.spectral {
                        out.push((format!("{p}sn_u"), Tensor::from_vec(&[sn.u().len()], sn.u().to_vec())));
                        out.push((format!("{p}sn_v"), Tensor::from_vec(&[sn.v().len()], sn.v().to_vec())));
                    }
                }
                Layer::ConvTranspose(c) => {
                    out.push((format!("{p}weight"), c.weight.value.clone()));
                    out.push((format!("{p}bias"), c.bias.value.clone()));
                }
                Layer::Linear(l) => {
                    out.push((format!("{p}weight"), l.weight.value.clone()));
                    out.push((format!("{p}bias"), l.bias.value.clone()));
                    if let Some(sn) = &l.spectral {
                        out.push((format!("{p}sn_u"), Tensor::from_vec(&[sn.u().len()], sn.u().to_vec())));
                        out.push((format!("{p}sn_v"), Tensor::from_vec(&[sn.v().len()], sn.v().to_vec())));
                    }
                }
                Layer::BatchNorm(bn) => {
                    let c = bn.channels();
                    out.push((format!("{p}gamma"), bn.gamma.value.clone()));
                    out.push((format!("{p}beta"), bn.beta.value.clone()));
                    out.push((format!("{p}running_mean"), Tensor::from_vec(&[c], bn.running_mean.clone())));
                    out.push((format!("{p}running_var"), Tensor::from_vec(&[c], bn.running_var.clone())));
                }
                Layer::Residual(r) => {
                    out.extend(r.main.state(&format!("{p}main.")));
                    out.extend(r.shortcut.state(&format!("{p}shortcut.")));
                }
                _ => {}
            }
        }
        out
    }

    /// Restores state produced by [`Sequential::state`] on an identically
    /// shaped network, then recomputes normalized weights without iterating.
    pub fn load_state(&mut self, prefix: &str, tensors: &HashMap<String, Tensor<T>>) -> Result<(), String> {
        fn take<T: Scalar>(
            tensors: &HashMap<String, Tensor<T>>,
            name: &str,
            shape: &[usize],
        ) -> Result<Tensor<T>, String> {
            let t = tensors.get(name).ok_or_else(|| format!("missing tensor `{name}`"))?;
            if t.shape() != shape {
                return Err(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape()));
            }
            Ok(t.clone())
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("{prefix}{i}.");
            match layer {
                Layer::Conv(c) => {
                    c.weight.value = take(tensors, &format!("{p}weight"), c.weight.value.shape())?;
                    c.bias.value = take(tensors, &format!("{p}bias"), c.bias.value.shape())?;
                    if let Some(sn) = c.spectral.as_mut() {
                        let u = take(tensors, &format!("{p}sn_u"), &[sn.u().len()])?;
                        let v = take(tensors, &format!("{p}sn_v"), &[sn.v().len()])?;
                        sn.set_vectors(u.data(), v.data())?;
                    }
                }
                Layer::ConvTranspose(c) => {
                    c.weight.value = take(tensors, &format!("{p}weight"), c.weight.value.shape())?;
                    c.bias.value = take(tensors, &format!("{p}bias"), c.bias.value.shape())?;
                }
                Layer::Linear(l) => {
                    l.weight.value = take(tensors, &format!("{p}weight"), l.weight.value.shape())?;
                    l.bias.value = take(tensors, &format!("{p}bias"), l.bias.value.shape())?;
                    if let Some(sn) = l.spectral.as_mut() {
                        let u = take(tensors, &format!("{p}sn_u"), &[sn.u().len()])?;
                        let v = take(tensors, &format!("{p}sn_v"), &[sn.v().len()])?;
                        sn.set_vectors(u.data(), v.data())?;
                    }
                }
                Layer::BatchNorm(bn) => {
                    let c = bn.channels();
                    bn.gamma.value = take(tensors, &format!("{p}gamma"), &[c])?;
                    bn.beta.value = take(tensors, &format!("{p}beta"), &[c])?;
                    bn.running_mean = take(tensors, &format!("{p}running_mean"), &[c])?.into_data();
                    bn.running_var = take(tensors, &format!("{p}running_var"), &[c])?.into_data();
                }
                Layer::Residual(r) => {
                    r.main.load_state(&format!("{p}main."), tensors)?;
                    r.shortcut.load_state(&format!("{p}shortcut."), tensors)?;
                }
                _ => {}
            }
        }
        self.refresh_spectral(false);
        Ok(())
    }
}
