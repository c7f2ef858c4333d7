use rand::Rng;
use rand_distr::StandardNormal;

use crate::Scalar;

const NORM_EPS: f64 = 1e-12;

/// Spectral normalization state for a weight viewed as a `rows x cols` matrix.
///
/// The forward pass uses `W / sigma` with `sigma = u^T W v`, where `u` and `v`
/// are power-iteration estimates of the top singular vectors. `u` and `v` are
/// treated as constants when differentiating.
#[derive(Clone, Debug)]
pub struct SpectralNorm<T> {
    rows: usize,
    cols: usize,
    u: Vec<T>,
    v: Vec<T>,
    sigma: T,
    normalized: Vec<T>,
}

fn normalize<T: Scalar>(x: &mut [T]) {
    let norm = x.iter().map(|&a| a * a).sum::<T>().sqrt();
    let denom = norm.max(T::from_f64_lossy(NORM_EPS));
    for a in x.iter_mut() {
        *a = *a / denom;
    }
}

impl<T: Scalar> SpectralNorm<T> {
    pub fn new(weight: &[T], rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(weight.len(), rows * cols);
        let mut u: Vec<T> = (0..rows)
            .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        normalize(&mut u);
        let mut sn = Self {
            rows,
            cols,
            u,
            v: vec![T::zero(); cols],
            sigma: T::one(),
            normalized: weight.to_vec(),
        };
        sn.power_iteration(weight);
        sn.refresh(weight);
        sn
    }

    /// One power-iteration step: `v <- W^T u / |.|`, `u <- W v / |.|`.
    pub fn power_iteration(&mut self, weight: &[T]) {
        let (r, c) = (self.rows, self.cols);
        let mut v = vec![T::zero(); c];
        for i in 0..r {
            let ui = self.u[i];
            for (vj, &w) in v.iter_mut().zip(&weight[i * c..(i + 1) * c]) {
                *vj = *vj + w * ui;
            }
        }
        normalize(&mut v);
        let mut u: Vec<T> = (0..r)
            .map(|i| {
                weight[i * c..(i + 1) * c]
                    .iter()
                    .zip(&v)
                    .map(|(&w, &vj)| w * vj)
                    .sum()
            })
            .collect();
        normalize(&mut u);
        self.u = u;
        self.v = v;
    }

    /// Recomputes `sigma` and the normalized weight from the current `u`, `v`.
    pub fn refresh(&mut self, weight: &[T]) {
        let c = self.cols;
        let sigma: T = (0..self.rows)
            .map(|i| {
                let wv: T = weight[i * c..(i + 1) * c]
                    .iter()
                    .zip(&self.v)
                    .map(|(&w, &vj)| w * vj)
                    .sum();
                self.u[i] * wv
            })
            .sum();
        let floor = T::from_f64_lossy(NORM_EPS);
        self.sigma = if sigma > floor { sigma } else { floor };
        let inv = T::one() / self.sigma;
        self.normalized = weight.iter().map(|&w| w * inv).collect();
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn normalized(&self) -> &[T] {
        &self.normalized
    }

    pub fn u(&self) -> &[T] {
        &self.u
    }

    pub fn v(&self) -> &[T] {
        &self.v
    }

    pub fn set_vectors(&mut self, u: &[T], v: &[T]) -> Result<(), String> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(format!(
                "spectral vectors of length {}/{} do not fit a {}x{} weight",
                u.len(),
                v.len(),
                self.rows,
                self.cols
            ));
        }
        self.u = u.to_vec();
        self.v = v.to_vec();
        Ok(())
    }

    /// Adds `dL/dW` to `grad_weight` given `dL/d(W/sigma)`.
    pub fn backprop(&self, grad_normalized: &[T], grad_weight: &mut [T]) {
        let c = self.cols;
        let inner: T = grad_normalized
            .iter()
            .zip(&self.normalized)
            .map(|(&g, &w)| g * w)
            .sum();
        let inv = T::one() / self.sigma;
        for i in 0..self.rows {
            let ui = self.u[i] * inner;
            for j in 0..c {
                let idx = i * c + j;
                grad_weight[idx] = grad_weight[idx] + (grad_normalized[idx] - ui * self.v[j]) * inv;
            }
        }
    }
}

/// Top singular value of a `rows x cols` matrix by power iteration from a
/// deterministic start vector.
pub fn top_singular_value<T: Scalar>(weight: &[T], rows: usize, cols: usize, iters: usize) -> f64 {
    let w: Vec<f64> = weight.iter().map(|v| v.as_f64()).collect();
    let mut v: Vec<f64> = (0..cols).map(|j| 1.0 + (j as f64 * 0.618).fract()).collect();
    let mut sigma = 0.0;
    for _ in 0..iters {
        let u: Vec<f64> = (0..rows)
            .map(|i| (0..cols).map(|j| w[i * cols + j] * v[j]).sum())
            .collect();
        let mut nv = vec![0.0; cols];
        for i in 0..rows {
            for j in 0..cols {
                nv[j] += w[i * cols + j] * u[i];
            }
        }
        let norm = nv.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        sigma = norm.sqrt();
        v = nv.into_iter().map(|a| a / norm).collect();
    }
    sigma
}
