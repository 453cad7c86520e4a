//! SGD with momentum and the cosine-annealed learning rate.

use std::collections::HashMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::Result;
use crate::model::Param;

/// `lr(t) = lr0 · ½(1 + cos(π t / t_max))`.
pub fn cosine_lr(initial_lr: f64, epoch: usize, t_max: usize) -> f64 {
    if t_max == 0 {
        return initial_lr;
    }
    initial_lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / t_max as f64).cos())
}

/// Heavy-ball SGD: `g ← ∇ + wd·θ`, `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug)]
pub struct SgdMomentum {
    params: Vec<Param>,
    momentum: f64,
    weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl SgdMomentum {
    pub fn new(params: Vec<Param>, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            params,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Update every parameter that received a gradient; others are left alone.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        for p in &self.params {
            let Some(grad) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let theta = p.var.as_tensor();
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g = (g + (theta * self.weight_decay)?)?;
            }
            let v = match self.velocity.get(&p.name) {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            p.var.set(&(theta - (&v * lr)?)?)?;
            self.velocity.insert(p.name.clone(), v.detach());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamGroup, ParamStore};
    use candle_core::{DType, Device};

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
        for e in 0..10 {
            assert!(cosine_lr(0.1, e + 1, 10) < cosine_lr(0.1, e, 10));
        }
    }

    #[test]
    fn momentum_matches_hand_iteration() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let x = store.constant("x", &[1], 3.0, ParamGroup::Encoder, true).unwrap();
        let mut opt = SgdMomentum::new(store.trainable(&ParamGroup::ALL), 0.9, 0.1);
        // f(x) = x², so g = 2x + 0.1x
        let (mut xh, mut vh) = (3.0f64, 0.0f64);
        for _ in 0..5 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads, 0.05).unwrap();
            let g = 2.0 * xh + 0.1 * xh;
            vh = 0.9 * vh + g;
            xh -= 0.05 * vh;
        }
        let got = x.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((got - xh).abs() < 1e-12, "{got} vs {xh}");
    }

    #[test]
    fn untouched_params_stay_put() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu, 0);
        let a = store.constant("a", &[2], 1.0, ParamGroup::Encoder, true).unwrap();
        let b = store.constant("b", &[2], 1.0, ParamGroup::Classifier, true).unwrap();
        let mut opt = SgdMomentum::new(store.trainable(&ParamGroup::ALL), 0.9, 0.5);
        let grads = a.as_tensor().sum_all().unwrap().backward().unwrap();
        opt.step(&grads, 0.1).unwrap();
        assert_eq!(b.as_tensor().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
        assert_ne!(a.as_tensor().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
    }
}
