//! Latent-space regularizers: simplex interpolation of encoded codes and
//! synthetic negative codes drawn near (but off) the Gaussian typical shell.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use ama_nn::{Scalar, Tensor};

use crate::{AmaError, Result};

const MAX_WEIGHT_DRAWS: usize = 100;

/// A batch of `d`-dimensional latent codes, stored `[batch, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch<T> {
    pub codes: Tensor<T>,
}

impl<T: Scalar> LatentBatch<T> {
    pub fn new(codes: Tensor<T>) -> Result<Self> {
        if codes.shape().len() != 2 {
            return Err(AmaError::contract(format!("latent batch must be rank 2, got {:?}", codes.shape())));
        }
        if !codes.all_finite() {
            return Err(AmaError::Numeric("latent batch holds non-finite entries".into()));
        }
        Ok(Self { codes })
    }

    pub fn len(&self) -> usize {
        self.codes.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.codes.dim(1)
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.codes.row(i).iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimplexConfig {
    pub k: usize,
    pub alpha_range: (f64, f64),
}

impl Default for SimplexConfig {
    fn default() -> Self {
        Self {
            k: 3,
            alpha_range: (0.0, 0.5),
        }
    }
}

impl SimplexConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.alpha_range;
        if self.k < 2 {
            return Err(AmaError::config("interp_k", "at least 2 codes are needed"));
        }
        if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
            return Err(AmaError::config("alpha_high", format!("invalid weight range [{lo}, {hi}]")));
        }
        Ok(())
    }

    /// Raw weights drawn uniformly from `alpha_range`, redrawn while they sum
    /// to zero.
    pub fn sample_weights(&self, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let (lo, hi) = self.alpha_range;
        for _ in 0..MAX_WEIGHT_DRAWS {
            let w: Vec<f64> = (0..self.k).map(|_| rng.random_range(lo..hi)).collect();
            if w.iter().sum::<f64>() > 0.0 {
                return Ok(w);
            }
        }
        Err(AmaError::Numeric(format!(
            "interpolation weights summed to zero {MAX_WEIGHT_DRAWS} times in a row"
        )))
    }
}

/// `sum(a_i e_i) / sum(a_i)` over the rows of `latents`.
///
/// Without explicit weights they are drawn from `cfg`.
pub fn simplex_interpolate<T: Scalar>(
    latents: &LatentBatch<T>,
    weights: Option<&[f64]>,
    cfg: &SimplexConfig,
    rng: &mut impl Rng,
) -> Result<Vec<T>> {
    if latents.len() != cfg.k {
        return Err(AmaError::contract(format!("expected {} codes, got {}", cfg.k, latents.len())));
    }
    let w = match weights {
        Some(w) => {
            let (lo, hi) = cfg.alpha_range;
            if w.len() != cfg.k {
                return Err(AmaError::contract(format!("expected {} weights, got {}", cfg.k, w.len())));
            }
            if let Some(bad) = w.iter().find(|a| !(lo..=hi).contains(*a)) {
                return Err(AmaError::contract(format!("weight {bad} outside [{lo}, {hi}]")));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(AmaError::Numeric("interpolation weights sum to zero".into()));
            }
            w.to_vec()
        }
        None => cfg.sample_weights(rng)?,
    };
    let total: f64 = w.iter().sum();
    let d = latents.dim();
    let mut out = vec![0.0f64; d];
    for (i, &a) in w.iter().enumerate() {
        let coeff = a / total;
        for (o, v) in out.iter_mut().zip(latents.codes.row(i)) {
            *o += coeff * v.as_f64();
        }
    }
    Ok(out.into_iter().map(T::from_f64_lossy).collect())
}

/// Which simplex each interpolated code of a minibatch is built from.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpPlan {
    /// Row indices per interpolant; the first member is the sample the
    /// interpolant is paired with.
    pub members: Vec<Vec<usize>>,
    /// Normalized weights, one per member.
    pub weights: Vec<Vec<f64>>,
}

impl InterpPlan {
    /// One interpolant per row of a batch of `n`, anchored at that row and
    /// mixed with `k - 1` other rows of the same batch.
    pub fn sample(n: usize, cfg: &SimplexConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if n == 0 {
            return Err(AmaError::contract("cannot plan interpolation for an empty batch"));
        }
        let mut members = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for anchor in 0..n {
            let mut group = vec![anchor];
            if n > cfg.k - 1 {
                // draw k-1 distinct partners from the other n-1 rows
                group.extend(
                    sample_indices(rng, n - 1, cfg.k - 1)
                        .into_iter()
                        .map(|j| if j >= anchor { j + 1 } else { j }),
                );
            } else {
                group.extend((1..cfg.k).map(|_| rng.random_range(0..n)));
            }
            let raw = cfg.sample_weights(rng)?;
            let total: f64 = raw.iter().sum();
            members.push(group);
            weights.push(raw.into_iter().map(|a| a / total).collect());
        }
        Ok(Self { members, weights })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Interpolated codes `[len, d]` from encoded codes `[n, d]`.
    pub fn mix<T: Scalar>(&self, codes: &Tensor<T>) -> Tensor<T> {
        let d = codes.dim(1);
        let mut out = Tensor::zeros(&[self.len(), d]);
        for (i, (group, w)) in self.members.iter().zip(&self.weights).enumerate() {
            let row = &mut out.data_mut()[i * d..(i + 1) * d];
            for (&j, &a) in group.iter().zip(w) {
                let a = T::from_f64_lossy(a);
                for (o, &v) in row.iter_mut().zip(codes.row(j)) {
                    *o = *o + a * v;
                }
            }
        }
        out
    }

    /// Adjoint of [`InterpPlan::mix`]: adds the gradient w.r.t. the mixed
    /// codes onto `grad_codes`.
    pub fn mix_backward<T: Scalar>(&self, grad_mixed: &Tensor<T>, grad_codes: &mut Tensor<T>) {
        let d = grad_codes.dim(1);
        for (i, (group, w)) in self.members.iter().zip(&self.weights).enumerate() {
            let g = grad_mixed.row(i).to_vec();
            for (&j, &a) in group.iter().zip(w) {
                let a = T::from_f64_lossy(a);
                for (o, &v) in grad_codes.data_mut()[j * d..(j + 1) * d].iter_mut().zip(&g) {
                    *o = *o + a * v;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Band inside the typical shell: `[sqrt(d) - delta, sqrt(d)]`.
    Inward,
    /// Band outside the typical shell: `[sqrt(d), sqrt(d) + delta]`.
    Outward,
}

/// Source of synthetic negative codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    Atypical,
    /// Uniform codes in a cube around the origin.
    Sipple,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AtypicalConfig {
    pub d: usize,
    pub delta: f64,
    pub direction: Direction,
}

impl AtypicalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(AmaError::config("latent_dim", "must be at least 1"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(AmaError::config("delta", format!("must be non-negative, got {}", self.delta)));
        }
        let r = (self.d as f64).sqrt();
        if self.direction == Direction::Inward && self.delta >= r {
            return Err(AmaError::config(
                "delta",
                format!("inward band needs delta < sqrt(d) = {r:.4}, got {}", self.delta),
            ));
        }
        Ok(())
    }

    /// `(inner, outer)` radii of the sampling band.
    pub fn band(&self) -> (f64, f64) {
        let r = (self.d as f64).sqrt();
        match self.direction {
            Direction::Inward => (r - self.delta, r),
            Direction::Outward => (r, r + self.delta),
        }
    }
}

/// Uniform direction on the unit sphere, radius uniform over the band.
pub fn sample_atypical<T: Scalar>(cfg: &AtypicalConfig, n: usize, rng: &mut impl Rng) -> Result<LatentBatch<T>> {
    cfg.validate()?;
    if n == 0 {
        return Err(AmaError::contract("sample count must be at least 1"));
    }
    let (lo, hi) = cfg.band();
    let d = cfg.d;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let dir = loop {
            let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break g.into_iter().map(|v| v / norm).collect::<Vec<_>>();
            }
        };
        let radius = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        data.extend(dir.into_iter().map(|v| T::from_f64_lossy(v * radius)));
    }
    LatentBatch::new(Tensor::from_vec(&[n, d], data))
}

/// Each coordinate i.i.d. uniform on `[-half_width, half_width]`.
pub fn sample_sipple_negatives<T: Scalar>(
    d: usize,
    half_width: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<LatentBatch<T>> {
    if !(half_width >= 0.0 && half_width.is_finite()) {
        return Err(AmaError::config("sipple_half_width", format!("must be non-negative, got {half_width}")));
    }
    if d == 0 || n == 0 {
        return Err(AmaError::contract("dimension and sample count must be at least 1"));
    }
    let data = (0..n * d)
        .map(|_| {
            if half_width == 0.0 {
                T::zero()
            } else {
                T::from_f64_lossy(rng.random_range(-half_width..=half_width))
            }
        })
        .collect();
    LatentBatch::new(Tensor::from_vec(&[n, d], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn basis(k: usize, d: usize) -> LatentBatch<f64> {
        let mut t = Tensor::zeros(&[k, d]);
        for i in 0..k {
            t.data_mut()[i * d + i] = 1.0;
        }
        LatentBatch::new(t).unwrap()
    }

    #[test]
    fn interpolating_identical_codes_returns_that_code() {
        let v = [0.3f64, -1.2, 4.0];
        let t = Tensor::from_vec(&[3, 3], v.iter().cycle().take(9).copied().collect());
        let out = simplex_interpolate(&LatentBatch::new(t).unwrap(), None, &SimplexConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for (a, b) in out.iter().zip(v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn explicit_weights_on_basis_vectors() {
        let out = simplex_interpolate(&basis(3, 5), Some(&[0.5, 0.25, 0.25]), &SimplexConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(out, vec![0.5, 0.25, 0.25, 0.0, 0.0]);
    }

    #[test]
    fn equal_weights_give_the_mean() {
        let t = Tensor::from_vec(&[3, 2], vec![1.0f64, 2.0, 3.0, -4.0, 8.0, 5.0]);
        let out = simplex_interpolate(&LatentBatch::new(t).unwrap(), Some(&[0.2, 0.2, 0.2]), &SimplexConfig::default(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert!((out[0] - 4.0).abs() < 1e-12 && (out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_are_rejected() {
        let err = simplex_interpolate(&basis(3, 3), Some(&[0.0, 0.0, 0.0]), &SimplexConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(AmaError::Numeric(_))));
    }

    #[test]
    fn plan_anchors_each_row_and_mix_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let plan = InterpPlan::sample(6, &SimplexConfig::default(), &mut rng).unwrap();
        for (i, g) in plan.members.iter().enumerate() {
            assert_eq!(g[0], i);
            let mut sorted = g.clone();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), 3, "members must be distinct");
        }
        for w in &plan.weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let codes = Tensor::from_vec(&[6, 2], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect());
        let probe = Tensor::from_vec(&[6, 2], (0..12).map(|i| (i * 7 % 5) as f64).collect());
        let lhs: f64 = plan.mix(&codes).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        let mut g = Tensor::zeros(&[6, 2]);
        plan.mix_backward(&probe, &mut g);
        let rhs: f64 = g.data().iter().zip(codes.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn atypical_band_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out: LatentBatch<f64> = sample_atypical(
            &AtypicalConfig {
                d: 100,
                delta: 1.0,
                direction: Direction::Outward,
            },
            1000,
            &mut rng,
        )
        .unwrap();
        assert!(out.norms().iter().all(|&r| (10.0 - 1e-9..=11.0 + 1e-9).contains(&r)));
        let inward: LatentBatch<f64> = sample_atypical(
            &AtypicalConfig {
                d: 64,
                delta: 0.5,
                direction: Direction::Inward,
            },
            1000,
            &mut rng,
        )
        .unwrap();
        assert!(inward.norms().iter().all(|&r| (7.5 - 1e-9..=8.0 + 1e-9).contains(&r)));
        let ring: LatentBatch<f64> = sample_atypical(
            &AtypicalConfig {
                d: 9,
                delta: 0.0,
                direction: Direction::Outward,
            },
            100,
            &mut rng,
        )
        .unwrap();
        assert!(ring.norms().iter().all(|&r| (r - 3.0).abs() < 1e-9));
    }

    #[test]
    fn inward_band_reaching_the_origin_is_a_config_error() {
        let cfg = AtypicalConfig {
            d: 4,
            delta: 2.0,
            direction: Direction::Inward,
        };
        assert!(matches!(sample_atypical::<f64>(&cfg, 1, &mut ChaCha8Rng::seed_from_u64(0)), Err(AmaError::Config { .. })));
    }

    #[test]
    fn sipple_cube_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cube: LatentBatch<f64> = sample_sipple_negatives(4, 1.0, 500, &mut rng).unwrap();
        assert!(cube.codes.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let zero: LatentBatch<f64> = sample_sipple_negatives(3, 0.0, 5, &mut rng).unwrap();
        assert!(zero.codes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sipple_mean_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, h) = (10_000, 1.0);
        let s: LatentBatch<f64> = sample_sipple_negatives(2, h, n, &mut rng).unwrap();
        // per-coordinate std of the sample mean: h / sqrt(3 n)
        let bound = 3.0 * h / (3.0 * n as f64).sqrt();
        for c in 0..2 {
            let mean = (0..n).map(|i| s.codes.row(i)[c]).sum::<f64>() / n as f64;
            assert!(mean.abs() < bound, "coordinate {c} mean {mean}");
        }
    }

    #[test]
    fn samplers_are_pure_in_the_seed() {
        let cfg = AtypicalConfig {
            d: 16,
            delta: 1.0,
            direction: Direction::Outward,
        };
        let a: LatentBatch<f32> = sample_atypical(&cfg, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b: LatentBatch<f32> = sample_atypical(&cfg, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
}
