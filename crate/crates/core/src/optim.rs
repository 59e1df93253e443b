//! Adam and the exponential learning-rate schedule.

use lazysurf_tape::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// `base · 2^(−epoch / halving_epochs)`: continuous halving.
pub fn learning_rate(base: f64, halving_epochs: f64, epoch: f64) -> f64 {
    base * (-epoch / halving_epochs).exp2()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments per trainable parameter, in
    /// [`ParamStore::trainable`] order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let sizes: Vec<usize> = store.trainable().map(|id| store.get(id).len()).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn from_config(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self::new(store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// One bias-corrected update. `grads` is indexed by parameter id (see
    /// [`crate::nn::collect_grads`]).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        let ids: Vec<_> = store.trainable().collect();
        if ids.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, model has {}",
                self.m.len(),
                ids.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (slot, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(id.index()).and_then(Option::as_ref) else {
                continue;
            };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let w = store.get_mut(id).data_mut();
            if g.len() != w.len() || m.len() != w.len() {
                return Err(Error::Config(format!("gradient size mismatch for parameter {}", id.index())));
            }
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.param("w", Tensor::new(vec![1], vec![w]).unwrap());
        s.buffer("stat", Tensor::zeros(&[2]));
        s
    }

    #[test]
    fn schedule_halves_every_hundred_epochs() {
        assert_eq!(learning_rate(7.5e-4, 100.0, 0.0), 7.5e-4);
        assert!((learning_rate(7.5e-4, 100.0, 100.0) - 3.75e-4).abs() < 1e-18);
        assert!((learning_rate(7.5e-4, 100.0, 200.0) - 7.5e-4 / 4.0).abs() < 1e-18);
        assert!((learning_rate(1.0, 100.0, 50.0) - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(0.3);
        let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
        let g = vec![Some(Tensor::zeros(&[1])), None];
        for _ in 0..5 {
            adam.step(&mut s, &g, 0.1).unwrap();
        }
        assert_eq!(s.get(s.find("w").unwrap()).data(), &[0.3]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(1.0);
        let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
        adam.step(&mut s, &[Some(Tensor::new(vec![1], vec![1.0]).unwrap()), None], 0.1).unwrap();
        let w = s.get(s.find("w").unwrap()).data()[0];
        assert!((w - 0.9).abs() < 1e-6, "{w}");
    }

    #[test]
    fn matches_reference_recurrence() {
        // hand-rolled Adam on f(w) = (w - 3)^2
        let mut s = store(0.0);
        let mut adam = Adam::new(&s, 0.9, 0.999, 1e-8);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            let cur = s.get(s.find("w").unwrap()).data()[0];
            adam.step(&mut s, &[Some(Tensor::new(vec![1], vec![2.0 * (cur - 3.0)]).unwrap()), None], 0.05)
                .unwrap();
        }
        assert!((s.get(s.find("w").unwrap()).data()[0] - w).abs() < 1e-12);
    }
}
