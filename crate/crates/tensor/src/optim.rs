use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias-corrected first and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: ParamStore<T>,
    second: ParamStore<T>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: ParamStore::new(),
            second: ParamStore::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(t));
        let c2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(TensorError::Shape {
                    op: "Adam::step",
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            if !self.first.contains(name) {
                self.first.insert(name.clone(), Tensor::zeros(g.shape()));
                self.second.insert(name.clone(), Tensor::zeros(g.shape()));
            }
            let m = self.first.get_mut(name)?.data_mut();
            let v = self.second.get_mut(name)?.data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment tensors as `m.<name>` / `v.<name>` plus the step count, for
    /// checkpointing.
    pub fn state(&self) -> (u64, ParamStore<T>) {
        let mut s = ParamStore::new();
        s.extend_prefixed("m.", &self.first);
        s.extend_prefixed("v.", &self.second);
        (self.steps, s)
    }

    pub fn restore(lr: f64, steps: u64, state: &ParamStore<T>) -> Self {
        let mut a = Self::new(lr);
        a.steps = steps;
        a.first = state.subset("m.");
        a.second = state.subset("v.");
        a
    }
}
