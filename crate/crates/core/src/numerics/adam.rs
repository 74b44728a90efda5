use super::{ParamStore, Real};
use crate::error::{Error, Result};

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros = |_: ()| -> Vec<Vec<T>> {
            params
                .iter()
                .map(|(_, p)| vec![T::zero(); p.value.numel()])
                .collect()
        };
        Self {
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            first: zeros(()),
            second: zeros(()),
        }
    }

    /// One update of every parameter. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter_mut().find(|p| p.grad.is_none()) {
            return Err(Error::UninitializedGradient(p.name.clone()));
        }

        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let lr = self.learning_rate;
        let eps = T::of(self.epsilon);
        let step_size = T::of(lr / bias1);
        let inv_sqrt_bias2 = T::of(1.0 / bias2.sqrt());

        for ((p, m), v) in params
            .iter_mut()
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let decay = if p.decay { T::of(lr * self.weight_decay) } else { T::zero() };
            let grad = p.grad.as_ref().expect("checked above").data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = v[i].sqrt() * inv_sqrt_bias2 + eps;
                value[i] -= step_size * m[i] / denom + decay * value[i];
            }
        }
        Ok(())
    }
}
