use crate::codec::ParamStore;
use crate::tensor::Tensor;

use super::config::OptimConfig;

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Self {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; `grads` is indexed like the parameter store.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for ((x, (mi, vi)), &gi) in params.get_mut(id).data_mut().iter_mut().zip(m.iter_mut().zip(v.iter_mut())).zip(g) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *x -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}
