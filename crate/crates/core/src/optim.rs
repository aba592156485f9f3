//! SGD with momentum and weight decay, and the learning-rate schedule.

use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr_backbone: f64,
    pub lr_new: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1e-3,
            lr_new: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

impl SgdConfig {
    /// All rates at 1e-3 (the large synthetic-to-real benchmark setting).
    pub fn visda() -> Self {
        Self {
            lr_new: 1e-3,
            ..Self::default()
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::New => self.lr_new,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    /// `lr * (1 + 10 p)^-0.75` with `p` the training progress in `[0, 1]`.
    #[default]
    PolyDecay,
    Constant,
}

/// Learning rate at `step` of `total_steps`.
pub fn learning_rate_schedule(base_lr: f64, step: usize, total_steps: usize, schedule: Schedule) -> f64 {
    match schedule {
        Schedule::Constant => base_lr,
        Schedule::PolyDecay => {
            let p = if total_steps == 0 {
                0.0
            } else {
                (step as f64 / total_steps as f64).min(1.0)
            };
            base_lr * (1.0 + 10.0 * p).powf(-0.75)
        }
    }
}

/// Heavy-ball SGD: `v = m v + (g + wd w)`, `w -= lr v`. Parameters without a
/// gradient are left untouched, including their decay and momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    /// `lr_scale` multiplies both group rates (the schedule factor).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr_scale: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (i, grad) in grads.iter().enumerate().take(store.len()) {
            let Some(grad) = grad else { continue };
            let p = store.get_mut(i);
            let lr = self.config.lr(p.group) * lr_scale;
            let mut d = grad.clone();
            if self.config.weight_decay != 0.0 {
                d.add_scaled(&p.value, self.config.weight_decay);
            }
            let v = match &mut self.velocity[i] {
                Some(v) => {
                    for (vv, dd) in v.data_mut().iter_mut().zip(d.data()) {
                        *vv = self.config.momentum * *vv + dd;
                    }
                    v
                }
                slot @ None => slot.insert(d),
            };
            p.value.add_scaled(v, -lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        assert_eq!(learning_rate_schedule(0.01, 0, 100, Schedule::PolyDecay), 0.01);
        let end = learning_rate_schedule(0.01, 100, 100, Schedule::PolyDecay);
        assert!((end - 0.01 * 11f64.powf(-0.75)).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 0..=100 {
            let lr = learning_rate_schedule(0.01, s, 100, Schedule::PolyDecay);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(learning_rate_schedule(0.5, 70, 100, Schedule::Constant), 0.5);
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let mut store = ParamStore::new(0);
        store.push("w", Tensor::from_vec(&[1], vec![1.0]).unwrap(), ParamGroup::New);
        store.push("frozen", Tensor::from_vec(&[1], vec![5.0]).unwrap(), ParamGroup::Backbone);
        let mut opt = Sgd::new(SgdConfig {
            lr_backbone: 0.0,
            lr_new: 0.1,
            momentum: 0.5,
            weight_decay: 0.1,
        });
        let g = vec![Some(Tensor::from_vec(&[1], vec![2.0]).unwrap()), None];
        opt.step(&mut store, &g, 1.0);
        // v = 2 + 0.1 * 1 = 2.1; w = 1 - 0.21
        assert!((store.get(0).value.item() - 0.79).abs() < 1e-12);
        opt.step(&mut store, &g, 1.0);
        // v = 0.5 * 2.1 + 2 + 0.079 = 3.129
        assert!((store.get(0).value.item() - (0.79 - 0.3129)).abs() < 1e-12);
        assert_eq!(store.get(1).value.item(), 5.0);
    }
}
