use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are allocated lazily on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::Invalid("adam: moment lists differ in length".into()));
        }
        Ok(Self { config, step, m, v })
    }

    fn ensure_moments(&mut self, shapes: impl Iterator<Item = Vec<usize>>) {
        if self.m.is_empty() {
            for s in shapes {
                self.m.push(Tensor::zeros(&s));
                self.v.push(Tensor::zeros(&s));
            }
        }
    }

    fn apply(&mut self, index: usize, param: &mut Tensor<T>, grad: &Tensor<T>, t: u64) {
        let c = &self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - c.beta1.powi(t as i32));
        let bc2 = T::from_f64(1.0 - c.beta2.powi(t as i32));
        let (lr, eps) = (T::from_f64(c.lr), T::from_f64(c.eps));
        let m = self.m[index].data_mut();
        let v = self.v[index].data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }

    /// One update of every parameter in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        self.ensure_moments(store.params().iter().map(|p| p.value.shape().to_vec()));
        if self.m.len() != store.len() {
            return Err(Error::Invalid("adam: optimizer bound to a different store".into()));
        }
        self.step += 1;
        let t = self.step;
        let mut result = Ok(());
        store.update(grads, |i, p, g| {
            if result.is_ok() {
                self.apply(i, p, g, t);
            }
        })?;
        std::mem::replace(&mut result, Ok(()))
    }

    /// One update of free-standing tensors (e.g. latent codes).
    pub fn step_tensors(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        self.ensure_moments(params.iter().map(|p| p.shape().to_vec()));
        if self.m.len() != params.len() || grads.len() != params.len() {
            return Err(Error::Invalid("adam: tensor count changed between steps".into()));
        }
        self.step += 1;
        let t = self.step;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            p.expect_same_shape(g, "Adam::step_tensors")?;
            self.apply(i, p, g, t);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = vec![Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap()];
        let grads = vec![Tensor::from_f64(&[2], &[3.0, -0.5]).unwrap()];
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam.step_tensors(&mut params, &grads).unwrap();
        let d = params[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut params = vec![Tensor::<f32>::ones(&[3])];
        let before = params.clone();
        let mut adam = Adam::new(AdamConfig { lr: 0.0, beta1: 0.0, beta2: 0.99, eps: 1e-8 });
        adam.step_tensors(&mut params, &[Tensor::full(&[3], 2.0)]).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn frozen_store_rejects_updates() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::ones(&[2]));
        store.freeze();
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(&mut store, &[Tensor::ones(&[2])]).is_err());
    }
}
