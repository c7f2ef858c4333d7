//! Mirrored Wasserstein objective and its gradients.
//!
//! With `D(a, b)` the critic on a stacked pair, one minibatch defines
//!
//! ```text
//! J = mean[D(x,x) - D(x,x_rec)]
//!   + l_inter * mean[D(x,x) - D(x,x_inter)]
//!   + l_reg   * mean |E(x)|_2
//!   - l_neg   * mean[D(x,x) - D(x,x_neg)]
//! ```
//!
//! The critic ascends `J`, the encoder and generator descend it. The latent
//! norm term does not depend on the critic and is left out of its total.

use std::fmt;

use serde::{Deserialize, Serialize};

use ama_nn::{Backward, Mode, Scalar, Tensor, Trace};

use crate::data::ImageBatch;
use crate::latent::InterpPlan;
use crate::model::{Critic, Networks};
use crate::{AmaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_inter: f64,
    pub lambda_neg: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_inter: 0.5,
            lambda_neg: 5.0,
            lambda_reg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_inter", self.lambda_inter),
            ("lambda_neg", self.lambda_neg),
            ("lambda_reg", self.lambda_reg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AmaError::config(key, format!("must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted objective terms; absent terms were switched off for the step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mirrored: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interp: Option<f64>,
    pub latent_reg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Quantity the critic maximizes: `mirrored + l_inter*interp - l_neg*neg`.
    pub critic_total: f64,
    /// Quantity the encoder/generator minimize: the critic total plus `l_reg*latent_reg`.
    pub gen_total: f64,
    pub terms: LossTerms,
}

impl LossBreakdown {
    pub fn from_terms(terms: LossTerms, w: &LossWeights) -> Self {
        let critic_total = terms.mirrored + w.lambda_inter * terms.interp.unwrap_or(0.0)
            - w.lambda_neg * terms.neg.unwrap_or(0.0);
        Self {
            critic_total,
            gen_total: critic_total + w.lambda_reg * terms.latent_reg,
            terms,
        }
    }

    pub fn is_finite(&self) -> bool {
        let t = &self.terms;
        [self.critic_total, self.gen_total, t.mirrored, t.latent_reg]
            .into_iter()
            .chain(t.interp)
            .chain(t.neg)
            .all(f64::is_finite)
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "critic_total={} gen_total={} mirrored={} latent_reg={}",
            self.critic_total, self.gen_total, self.terms.mirrored, self.terms.latent_reg
        )?;
        if let Some(v) = self.terms.interp {
            write!(f, " interp={v}")?;
        }
        if let Some(v) = self.terms.neg {
            write!(f, " neg={v}")?;
        }
        Ok(())
    }
}

/// What each player minimizes for one value of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    /// `L_normal - l_neg * L_neg`
    pub value: f64,
    /// The critic descends `-value`.
    pub critic_loss: f64,
    /// The encoder and generator descend `value`.
    pub generator_loss: f64,
}

pub fn assemble_objective(normal: f64, neg: f64, w: &LossWeights) -> Objective {
    let value = normal - w.lambda_neg * neg;
    Objective {
        value,
        critic_loss: -value,
        generator_loss: value,
    }
}

fn mean<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64()).sum::<f64>() / v.len() as f64
}

fn mean_gap<T: Scalar>(real: &[T], fake: &[T]) -> f64 {
    real.iter().zip(fake).map(|(a, b)| a.as_f64() - b.as_f64()).sum::<f64>() / real.len() as f64
}

fn row_norms<T: Scalar>(e: &Tensor<T>) -> Vec<f64> {
    (0..e.batch())
        .map(|i| e.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect()
}

/// `mean[D(x,x) - D(x,x_hat)]` in evaluation mode.
pub fn mirrored_critic_loss<T: Scalar>(critic: &Critic<T>, x: &ImageBatch<T>, x_hat: &ImageBatch<T>) -> Result<f64> {
    let (real, _) = critic.discriminate_pair(x, x)?;
    let (fake, _) = critic.discriminate_pair(x, x_hat)?;
    Ok(mean_gap(&real, &fake))
}

/// `mean[D(x,x) - D(x,x_neg)]` in evaluation mode.
pub fn negative_loss<T: Scalar>(critic: &Critic<T>, x: &ImageBatch<T>, x_hat_neg: &ImageBatch<T>) -> Result<f64> {
    if x.len() != x_hat_neg.len() {
        return Err(AmaError::contract(format!(
            "{} normals paired with {} negatives",
            x.len(),
            x_hat_neg.len()
        )));
    }
    mirrored_critic_loss(critic, x, x_hat_neg)
}

/// `L_normal` in evaluation mode; the interpolated images pair with `x`
/// row by row.
pub fn normal_loss<T: Scalar>(
    nets: &Networks<T>,
    x: &ImageBatch<T>,
    x_hat_inter: Option<&ImageBatch<T>>,
    w: &LossWeights,
) -> Result<(f64, LossBreakdown)> {
    w.validate()?;
    let z = nets.encoder.encode(x)?;
    let x_rec = nets.generator.decode(&z)?;
    let (real, _) = nets.critic.discriminate_pair(x, x)?;
    let (rec, _) = nets.critic.discriminate_pair(x, &x_rec)?;
    let interp = match x_hat_inter {
        Some(xi) => {
            let (fake, _) = nets.critic.discriminate_pair(x, xi)?;
            Some(mean_gap(&real, &fake))
        }
        None => None,
    };
    let terms = LossTerms {
        mirrored: mean_gap(&real, &rec),
        interp,
        latent_reg: mean(&row_norms(&z.codes)),
        neg: None,
    };
    let b = LossBreakdown::from_terms(terms, w);
    Ok((b.gen_total, b))
}

/// Inputs of one optimization step.
#[derive(Clone, Debug)]
pub struct StepBatch<T> {
    /// Normal images `[B, H, W, C]`.
    pub x: Tensor<T>,
    /// Simplex interpolation plan over the rows of `x`.
    pub interp: Option<InterpPlan>,
    /// Negative codes `[B, d]`.
    pub z_neg: Option<Tensor<T>>,
}

struct Generated<T> {
    e: Tensor<T>,
    e_trace: Trace<T>,
    rec: (Tensor<T>, Trace<T>),
    interp: Option<(Tensor<T>, Trace<T>)>,
    neg: Option<(Tensor<T>, Trace<T>)>,
}

/// Training-mode encoder/generator passes; each generator call normalizes
/// with its own batch statistics.
fn generate<T: Scalar>(nets: &mut Networks<T>, batch: &StepBatch<T>) -> Result<Generated<T>> {
    let b = batch.x.batch();
    if let Some(p) = &batch.interp {
        if p.len() != b {
            return Err(AmaError::contract(format!("interpolation plan covers {} of {b} rows", p.len())));
        }
    }
    if let Some(z) = &batch.z_neg {
        if z.batch() != b || z.dim(1) != nets.spec.latent_dim {
            return Err(AmaError::contract(format!("negative codes {:?} do not fit the batch", z.shape())));
        }
    }
    let (e, e_trace) = nets.encoder.net.forward(&batch.x, Mode::Train);
    let rec = nets.generator.net.forward(&e, Mode::Train);
    let interp = batch
        .interp
        .as_ref()
        .map(|p| nets.generator.net.forward(&p.mix(&e), Mode::Train));
    let neg = batch.z_neg.as_ref().map(|z| nets.generator.net.forward(z, Mode::Train));
    Ok(Generated {
        e,
        e_trace,
        rec,
        interp,
        neg,
    })
}

fn terms_from<T: Scalar>(real: &[T], fakes: &[T], g: &Generated<T>) -> LossTerms {
    let b = real.len();
    let mut chunks = fakes.chunks(b);
    let mirrored = mean_gap(real, chunks.next().expect("reconstruction scores"));
    let interp = g.interp.as_ref().map(|_| mean_gap(real, chunks.next().expect("interp scores")));
    let neg = g.neg.as_ref().map(|_| mean_gap(real, chunks.next().expect("negative scores")));
    LossTerms {
        mirrored,
        interp,
        latent_reg: mean(&row_norms(&g.e)),
        neg,
    }
}

fn fake_images<T: Scalar>(g: &Generated<T>) -> Vec<&Tensor<T>> {
    std::iter::once(&g.rec.0)
        .chain(g.interp.as_ref().map(|t| &t.0))
        .chain(g.neg.as_ref().map(|t| &t.0))
        .collect()
}

fn pair_inputs<T: Scalar>(critic: &Critic<T>, x: &Tensor<T>, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let pairs = images.iter().map(|im| critic.pair_input(x, im)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor<T>> = pairs.iter().collect();
    Ok(Tensor::concat_batch(&refs))
}

/// Value of the objective from training-mode forward passes, without gradients.
pub fn objective_value<T: Scalar>(nets: &mut Networks<T>, batch: &StepBatch<T>, w: &LossWeights) -> Result<LossBreakdown> {
    let g = generate(nets, batch)?;
    let inputs = pair_inputs(&nets.critic, &batch.x, &[&batch.x])?;
    let real = nets.critic.head.infer(&nets.critic.body.infer(&inputs)).into_data();
    let fakes_in = pair_inputs(&nets.critic, &batch.x, &fake_images(&g))?;
    let fakes = nets.critic.head.infer(&nets.critic.body.infer(&fakes_in)).into_data();
    Ok(LossBreakdown::from_terms(terms_from(&real, &fakes, &g), w))
}

/// Accumulates the critic's gradients of `-J` and returns the objective.
pub fn critic_pass<T: Scalar>(nets: &mut Networks<T>, batch: &StepBatch<T>, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let g = generate(nets, batch)?;
    let b = batch.x.batch();
    let mut images = vec![&batch.x];
    images.extend(fake_images(&g));
    let input = pair_inputs(&nets.critic, &batch.x, &images)?;
    let critic = &mut nets.critic;
    let (features, body_trace) = critic.body.forward(&input, Mode::Train);
    let (scores, head_trace) = critic.head.forward(&features, Mode::Train);
    let scores = scores.into_data();
    let (real, fakes) = scores.split_at(b);
    let breakdown = LossBreakdown::from_terms(terms_from(real, fakes, &g), w);

    let inv_b = 1.0 / b as f64;
    let interp_on = g.interp.is_some();
    let neg_on = g.neg.is_some();
    let real_coeff = 1.0 + if interp_on { w.lambda_inter } else { 0.0 } - if neg_on { w.lambda_neg } else { 0.0 };
    let mut coeffs = vec![-real_coeff * inv_b, inv_b];
    if interp_on {
        coeffs.push(w.lambda_inter * inv_b);
    }
    if neg_on {
        coeffs.push(-w.lambda_neg * inv_b);
    }
    let grad: Vec<T> = coeffs
        .iter()
        .flat_map(|&c| std::iter::repeat_n(T::from_f64_lossy(c), b))
        .collect();
    let grad = Tensor::from_vec(&[grad.len(), 1], grad);
    let gf = critic.head.backward(head_trace, grad, Backward::ALL).expect("feature gradient");
    critic.body.backward(body_trace, gf, Backward::PARAMS);
    Ok(breakdown)
}

/// Accumulates encoder and generator gradients of `J` and returns the objective.
pub fn generator_pass<T: Scalar>(nets: &mut Networks<T>, batch: &StepBatch<T>, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let g = generate(nets, batch)?;
    let b = batch.x.batch();
    let c = nets.spec.image_shape.0;
    let mirrored = nets.critic.spec.mirrored;

    let real_in = pair_inputs(&nets.critic, &batch.x, &[&batch.x])?;
    let real = nets.critic.head.infer(&nets.critic.body.infer(&real_in)).into_data();
    let fake_in = pair_inputs(&nets.critic, &batch.x, &fake_images(&g))?;
    let critic = &mut nets.critic;
    let (features, body_trace) = critic.body.forward(&fake_in, Mode::Train);
    let (scores, head_trace) = critic.head.forward(&features, Mode::Train);
    let breakdown = LossBreakdown::from_terms(terms_from(&real, scores.data(), &g), w);

    let inv_b = 1.0 / b as f64;
    let mut coeffs = vec![-inv_b];
    if g.interp.is_some() {
        coeffs.push(-w.lambda_inter * inv_b);
    }
    if g.neg.is_some() {
        coeffs.push(w.lambda_neg * inv_b);
    }
    let grad: Vec<T> = coeffs
        .iter()
        .flat_map(|&k| std::iter::repeat_n(T::from_f64_lossy(k), b))
        .collect();
    let grad = Tensor::from_vec(&[grad.len(), 1], grad);
    let gf = critic.head.backward(head_trace, grad, Backward::INPUT).expect("feature gradient");
    let g_in = critic.body.backward(body_trace, gf, Backward::INPUT).expect("input gradient");
    let g_images = if mirrored { g_in.split_channels(c).1 } else { g_in };
    let mut parts = g_images.split_batch(&vec![b; coeffs.len()]).into_iter();

    let gen = &mut nets.generator.net;
    let Generated {
        e,
        e_trace,
        rec,
        interp,
        neg,
    } = g;
    let mut de = gen.backward(rec.1, parts.next().expect("rec grad"), Backward::ALL).expect("code gradient");
    if let Some((_, trace)) = interp {
        let d_mix = gen.backward(trace, parts.next().expect("interp grad"), Backward::ALL).expect("code gradient");
        batch.interp.as_ref().expect("plan").mix_backward(&d_mix, &mut de);
    }
    if let Some((_, trace)) = neg {
        gen.backward(trace, parts.next().expect("neg grad"), Backward::PARAMS);
    }
    if w.lambda_reg > 0.0 {
        let d = e.dim(1);
        for (i, n) in row_norms(&e).into_iter().enumerate() {
            if n > 0.0 {
                let k = T::from_f64_lossy(w.lambda_reg * inv_b / n);
                for (g, &v) in de.data_mut()[i * d..(i + 1) * d].iter_mut().zip(e.row(i)) {
                    *g = *g + k * v;
                }
            }
        }
    }
    nets.encoder.net.backward(e_trace, de, Backward::PARAMS);
    Ok(breakdown)
}
