//! Adam and the step learning-rate schedule.

use serde::{Deserialize, Serialize};
use uvae_autograd::{Gradients, ParamStore, Scalar, Tensor};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr: f64,
    /// Iterations at which the learning rate is halved.
    pub halve_at: Vec<u64>,
    pub total_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adam".into(),
            lr: 1e-4,
            halve_at: vec![100_000],
            total_iters: 200_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if !self.name.eq_ignore_ascii_case("adam") {
            return bad(format!("unsupported optimizer {:?}; only adam is available", self.name));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.total_iters == 0 {
            return bad("total_iters must be > 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return bad("eps must be > 0 and weight_decay >= 0".into());
        }
        Ok(())
    }

    /// Learning rate used for the update at `iteration` (0-based).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let halvings = self.halve_at.iter().filter(|&&b| iteration >= b).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }
}

/// Adam moments, one pair per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }

    /// One bias-corrected update. Parameters without a gradient (unused by
    /// the loss) and their moments are left untouched.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &Gradients<T>,
        cfg: &OptimizerConfig,
        lr: f64,
    ) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(CoreError::ModelState("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..p.numel() {
                let mut gi = g.data()[i].as_f64();
                let pi = p.data()[i].as_f64();
                if cfg.weight_decay > 0.0 {
                    gi += cfg.weight_decay * pi;
                }
                let mi = b1 * m.data()[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].as_f64() + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = T::from_f64(mi);
                v.data_mut()[i] = T::from_f64(vi);
                let upd = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
                p.data_mut()[i] = T::from_f64(pi - upd);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use uvae_autograd::Graph;

    #[test]
    fn schedule_halves_after_boundary() {
        let c = OptimizerConfig::default();
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(99_999), 1e-4);
        assert_eq!(c.lr_at(100_000), 5e-5);
        assert_eq!(c.lr_at(150_000), 5e-5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("p", Tensor::from_vec(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store);
        let cfg = OptimizerConfig::default();
        let target = Tensor::zeros(&[2]);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let p = g.param(&store, id);
            let l = g.squared_error(p, &target).unwrap();
            let grads = g.backward(l).unwrap();
            adam.update(&mut store, &grads, &cfg, 0.01).unwrap();
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("p", Tensor::from_vec(&[1], vec![1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store);
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let l = g.squared_error(p, &Tensor::zeros(&[1])).unwrap();
        let grads = g.backward(l).unwrap();
        adam.update(&mut store, &grads, &OptimizerConfig::default(), 0.1).unwrap();
        assert!((store.get(id).data()[0] - 0.9).abs() < 1e-6);
    }
}
