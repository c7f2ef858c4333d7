use crate::layers::Param;
use crate::Scalar;

/// Adam optimizer; the learning rate may be changed between steps.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Descends along the accumulated gradients and clears them.
    ///
    /// The parameter list must come in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut Param<T>>) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter set changed between steps");
        self.steps += 1;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        let step_size = T::from_f64_lossy(self.lr / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(self.eps);
        for ((p, m), v) in params.into_iter().zip(&mut self.first).zip(&mut self.second) {
            assert_eq!(m.len(), p.value.len(), "parameter resized between steps");
            let grads = p.grad.data().to_vec();
            for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                *w = *w - step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
            p.zero_grad();
        }
    }
}
