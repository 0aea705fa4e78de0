use crate::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamConfig {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_betas(mut self, beta1: f32, beta2: f32) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let (value, grad) = store.value_and_grad_mut(id);
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * g;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * g * g;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *p -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.register("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::new(0.1), &store);
        for _ in 0..500 {
            let g: Vec<f32> = store.value(id).data().iter().map(|x| 2.0 * (x - 1.0)).collect();
            store.grad_mut(id).data_mut().copy_from_slice(&g);
            opt.step(&mut store);
        }
        for x in store.value(id).data() {
            assert!((x - 1.0).abs() < 1e-2, "{x}");
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.register("x", Tensor::new(&[1], vec![0.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::new(0.01), &store);
        store.grad_mut(id).data_mut()[0] = 5.0;
        opt.step(&mut store);
        assert!((store.value(id).data()[0] + 0.01).abs() < 1e-6);
        assert_eq!(store.grad(id).data()[0], 0.0);
    }
}
