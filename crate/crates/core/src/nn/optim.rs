//! Gradient descent with classical momentum.

use super::params::{Gradients, ParamId, ParamSet};
use super::tensor::Tensor;

/// SGD with momentum: `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Debug)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(params: &ParamSet, learning_rate: f64, momentum: f64) -> Self {
        let velocity = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            learning_rate,
            momentum,
            velocity,
        }
    }

    /// Apply one update restricted to `trainable` parameters. Parameters
    /// outside the set keep their values and momentum buffers untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, trainable: &[ParamId]) {
        for &id in trainable {
            let Some(grad) = grads.get(id) else { continue };
            let vel = &mut self.velocity[id.0];
            for (v, g) in vel.data_mut().iter_mut().zip(grad.data()) {
                *v = self.momentum * *v + *g;
            }
            let value = params.get_mut(id);
            for (p, v) in value.data_mut().iter_mut().zip(vel.data()) {
                *p -= self.learning_rate * *v;
            }
        }
    }
}
