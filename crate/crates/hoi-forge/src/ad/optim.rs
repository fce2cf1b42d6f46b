//! AdamW optimizer with decoupled weight decay.

use super::nn::ParamStore;

/// Adam with decoupled weight decay (Loshchilov & Hutter).
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Standard betas (0.9, 0.999) and eps 1e-8.
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: store.zero_grads(),
            v: store.zero_grads(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` must align with the store's parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient table misaligned with optimizer state");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for p in 0..grads.len() {
            let param = store.get_mut(super::nn::ParamId(p));
            assert_eq!(param.numel(), grads[p].len(), "gradient shape mismatch");
            let (m, v) = (&mut self.m[p], &mut self.v[p]);
            for i in 0..grads[p].len() {
                let g = grads[p][i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                param.data[i] = param.data[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
