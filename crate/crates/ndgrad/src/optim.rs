use crate::params::{Grads, ParamStore};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with per-parameter step counters. A parameter whose gradient is
/// exactly zero is skipped entirely: its value and moments stay untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.get(id).len()).collect();
        Adam {
            config,
            first: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            second: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        let c = &self.config;
        for (id, g) in grads.iter() {
            if g.data().iter().all(|v| *v == T::zero()) {
                continue;
            }
            let k = id.0;
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let bc1 = 1.0 - c.beta1.powi(t);
            let bc2 = 1.0 - c.beta2.powi(t);
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            let p = store.get_mut(id);
            for (i, (pv, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gv = gv.as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gv;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gv * gv;
                let update = c.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                *pv = T::from_f64(pv.as_f64() - update);
            }
        }
    }
}
