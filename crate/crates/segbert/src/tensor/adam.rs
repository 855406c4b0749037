//! Adam with bias correction over a [`ParamStore`].

use super::graph::{ParamStore, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        let v = store.iter().map(|(_, e)| vec![0.0; e.data.len()]).collect();
        Self { cfg, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Rejects non-finite gradients before touching any
    /// parameter, so a poisoned step leaves the store bit-identical.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> Result<(), TensorError> {
        assert_eq!(grads.len(), store.len(), "grad/store length mismatch");
        for (pid, e) in store.iter() {
            if grads[pid.0].iter().any(|g| !g.is_finite()) {
                return Err(TensorError::PoisonedGradient { name: e.name.clone() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for i in 0..grads.len() {
            let entry = store.get_mut(super::graph::ParamId(i));
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((p, g), (mi, vi)) in entry.data.iter_mut().zip(&grads[i]).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
