use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with moments kept in parameter-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub steps: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Any non-finite gradient aborts before a parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || grads.len() != store.len() {
            return Err(Error::Config(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::dim("adam_step", store.get(id).shape(), g.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grads[i].data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of `grads`.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = scalar_store(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, &[Tensor::scalar(0.3)], 0.01).unwrap();
        let (p, m, v) = (store.get(crate::tensor::ParamId(0)).item(), adam.m[0].item(), adam.v[0].item());
        adam.step(&mut store, &[Tensor::scalar(0.0)], 0.01).unwrap();
        assert_eq!(adam.m[0].item(), 0.9 * m);
        assert_eq!(adam.v[0].item(), 0.999 * v);
        assert!(store.get(crate::tensor::ParamId(0)).item() < p);
        let mut fresh = scalar_store(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &fresh);
        adam.step(&mut fresh, &[Tensor::scalar(0.0)], 0.01).unwrap();
        assert_eq!(fresh.get(crate::tensor::ParamId(0)).item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        for g in [1e-3, -4.0, 250.0] {
            let mut store = scalar_store(0.0);
            let mut adam = Adam::new(AdamConfig::default(), &store);
            adam.step(&mut store, &[Tensor::scalar(g)], 0.05).unwrap();
            let dx = store.get(crate::tensor::ParamId(0)).item();
            assert!(dx.abs() <= 0.05 * (1.0 + 1e-6));
            assert!((dx + 0.05 * g.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        for _ in 0..200 {
            let x = store.get(crate::tensor::ParamId(0)).item();
            adam.step(&mut store, &[Tensor::scalar(2.0 * x)], 0.1).unwrap();
        }
        assert!(store.get(crate::tensor::ParamId(0)).item().abs() < 0.05);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar_store(1.0);
        store.add("w.bias", Tensor::zeros([2]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let err = adam
            .step(&mut store, &[Tensor::scalar(1.0), Tensor::new([2], vec![0.0, f64::NAN]).unwrap()], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains("w.bias"));
        assert_eq!(store.get(crate::tensor::ParamId(0)).item(), 1.0);
        assert_eq!(adam.steps, 0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::new([2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g[0].data(), &[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
