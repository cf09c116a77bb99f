//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{config, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl OptimizerConfig {
    /// Pre-training settings of the reference setup (large pretrained backbones).
    pub fn reference_pretrain() -> Self {
        Self {
            learning_rate: 5e-6,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            epochs: 10,
        }
    }

    /// Pre-training profile for small randomly initialized encoders on CPU.
    pub fn desk_pretrain() -> Self {
        Self { learning_rate: 3e-4, batch_size: 64, ..Self::reference_pretrain() }
    }

    pub fn mmr() -> Self {
        Self { learning_rate: 1e-4, batch_size: 128, epochs: 200, ..Self::reference_pretrain() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return config("learning rate and weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config("Adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return config("batch size must be positive");
        }
        Ok(())
    }
}

pub struct AdamW {
    cfg: OptimizerConfig,
    params: Vec<ParamId>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamW {
    /// Optimizer over exactly `params`; every other entry of the store is left untouched.
    pub fn new(store: &ParamStore, params: Vec<ParamId>, cfg: OptimizerConfig) -> Self {
        let zeros = |id: &ParamId| {
            let p = store.get(*id);
            Matrix::zeros(p.rows(), p.cols())
        };
        let m = params.iter().map(zeros).collect();
        let v = params.iter().map(zeros).collect();
        Self { cfg, params, m, v, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, id) in self.params.iter().enumerate() {
            let Some(g) = grads.get(*id) else { continue };
            let p = store.get_mut(*id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *p -= c.learning_rate * (update + c.weight_decay * *p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = ParamStore::new();
        let id = s.insert("p", "x", Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::desk_pretrain() };
        let mut opt = AdamW::new(&s, vec![id], cfg);
        let grads = {
            let mut g = Graph::new(&s);
            let x = g.param(id);
            let loss = g.loss(3.0, &[x], vec![Matrix::from_vec(1, 2, vec![0.5, -2.0]).unwrap()]).unwrap();
            g.backward(loss).unwrap()
        };
        opt.step(&mut s, &grads);
        let d = s.get(id).data();
        assert!((d[0] - (1.0 - 3e-4)).abs() < 1e-9);
        assert!((d[1] - (-1.0 + 3e-4)).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut s = ParamStore::new();
        let id = s.insert("p", "x", Matrix::from_vec(1, 1, vec![2.0]).unwrap()).unwrap();
        let cfg = OptimizerConfig { weight_decay: 0.1, learning_rate: 0.5, ..OptimizerConfig::mmr() };
        let mut opt = AdamW::new(&s, vec![id], cfg);
        let grads = {
            let mut g = Graph::new(&s);
            let x = g.param(id);
            let loss = g.loss(0.0, &[x], vec![Matrix::zeros(1, 1)]).unwrap();
            g.backward(loss).unwrap()
        };
        opt.step(&mut s, &grads);
        assert!((s.get(id).data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }
}
