//! Per-parameter adaptive steps, accumulated-square flavor: the effective
//! step is the running RMS of past updates over the running RMS of past
//! gradients, which tolerates the rate-1.0 convention.

use crate::autodiff::Tensor;
use crate::model::ModelParams;
use std::collections::BTreeMap;

pub struct Adadelta {
    rho: f64,
    eps: f64,
    sq_grad: BTreeMap<String, Tensor>,
    sq_step: BTreeMap<String, Tensor>,
}

impl Adadelta {
    pub fn new() -> Self {
        Adadelta { rho: 0.9, eps: 1e-6, sq_grad: BTreeMap::new(), sq_step: BTreeMap::new() }
    }

    /// Applies one update; `lr` is the decayable global rate.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for name in params.names() {
            let grad = match grads.get(&name) {
                Some(gr) => gr.clone(),
                None => continue,
            };
            let value = params.param(&name);
            assert_eq!(grad.shape(), value.shape(), "gradient shape mismatch on {}", name);
            let sg = self
                .sq_grad
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let ss = self
                .sq_step
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let mut deltas = vec![0.0; grad.numel()];
            for (i, g) in grad.data().iter().enumerate() {
                let sgi = self.rho * sg.data()[i] + (1.0 - self.rho) * g * g;
                sg.data_mut()[i] = sgi;
                let d = -((ss.data()[i] + self.eps).sqrt() / (sgi + self.eps).sqrt()) * g;
                ss.data_mut()[i] = self.rho * ss.data()[i] + (1.0 - self.rho) * d * d;
                deltas[i] = d;
            }
            let value = params.param_mut(&name);
            for (v, d) in value.data_mut().iter_mut().zip(&deltas) {
                *v += lr * d;
            }
        }
    }
}

impl Default for Adadelta {
    fn default() -> Self {
        Self::new()
    }
}
