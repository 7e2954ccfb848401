//! Adam optimizer over a [`ParamStore`].

use vqreg_core::Scalar;

use crate::params::ParamStore;

pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, store: &ParamStore<T>) -> Self {
        let m = store.entries().iter().map(|e| vec![T::ZERO; e.data.len()]).collect();
        let v = store.entries().iter().map(|e| vec![T::ZERO; e.data.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update with gradients in parameter registration order.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) {
        assert_eq!(grads.len(), store.len(), "gradient count mismatch");
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let bias1 = 1.0 - self.beta1.powi(self.t as i32);
        let bias2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::from_f64(self.lr / bias1);
        let bias2_sqrt_inv = T::from_f64(1.0 / bias2.sqrt());
        let eps = T::from_f64(self.eps);
        for (pi, grad) in grads.iter().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let data = store.data_mut(crate::params::ParamId(pi));
            assert_eq!(grad.len(), data.len());
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let denom = v[i].sqrt() * bias2_sqrt_inv + eps;
                data[i] -= step * m[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Shape;

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(w) = sum (w - target)^2
        let target = [3.0f64, -1.5, 0.25];
        let mut store = ParamStore::new();
        let id = store.register("w", Shape::Tensor(vec![3]), vec![0.0; 3]);
        let mut opt = Adam::new(0.05, &store);
        for _ in 0..2000 {
            let grads: Vec<f64> =
                store.data(id).iter().zip(&target).map(|(w, t)| 2.0 * (w - t)).collect();
            opt.step(&mut store, &[grads]);
        }
        for (w, t) in store.data(id).iter().zip(&target) {
            assert!((w - t).abs() < 1e-6, "w={w} target={t}");
        }
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.register("w", Shape::Scalar, vec![0.0f64]);
        let mut opt = Adam::new(0.1, &store);
        opt.step(&mut store, &[vec![42.0]]);
        // bias-corrected first step is -lr * sign(g) up to eps
        assert!((store.data(id)[0] + 0.1).abs() < 1e-6);
    }
}
