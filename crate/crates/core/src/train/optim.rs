use std::collections::HashMap;

use crate::autograd::{Gradients, ParamKey};
use crate::nn::Module;
use crate::tensor::{Float, Tensor};

/// Step learning-rate schedule: `base * factor^k` after `k` milestones.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.base * self.factor.powi(k as i32)
    }
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu v + (g + wd p)`, `p -= lr v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Float> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamKey, Tensor<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: HashMap::new() }
    }

    /// Update every trainable parameter of `module` that has a gradient.
    /// Returns how many tensors changed.
    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Gradients<T>, lr: f64) -> usize {
        let (mu, wd, lr) = (
            T::from_f64_lossy(self.momentum),
            T::from_f64_lossy(self.weight_decay),
            T::from_f64_lossy(lr),
        );
        let mut updated = 0;
        let velocity = &mut self.velocity;
        module.visit_mut("", &mut |_, p| {
            if !p.trainable() {
                return;
            }
            let Some(g) = grads.get(p) else { return };
            let v = velocity.entry(p.key()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((pv, vv), &gv) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
            updated += 1;
        });
        updated
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, Default)]
pub struct Adam<T: Float> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<ParamKey, (Tensor<T>, Tensor<T>, i32)>,
}

impl<T: Float> Adam<T> {
    pub fn new(weight_decay: f64) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, state: HashMap::new() }
    }

    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Gradients<T>, lr: f64) -> usize {
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut updated = 0;
        let state = &mut self.state;
        module.visit_mut("", &mut |_, p| {
            if !p.trainable() {
                return;
            }
            let Some(g) = grads.get(p) else { return };
            let (m, v, t) = state
                .entry(p.key())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()), 0));
            *t += 1;
            let c1 = 1.0 - b1.powi(*t);
            let c2 = 1.0 - b2.powi(*t);
            for (((pv, mv), vv), &gv) in p.value.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                let gr = gv.as_f64() + wd * pv.as_f64();
                let mn = b1 * mv.as_f64() + (1.0 - b1) * gr;
                let vn = b2 * vv.as_f64() + (1.0 - b2) * gr * gr;
                *mv = T::from_f64_lossy(mn);
                *vv = T::from_f64_lossy(vn);
                let step = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *pv = T::from_f64_lossy(pv.as_f64() - step);
            }
            updated += 1;
        });
        updated
    }
}

/// The optimizer selected by a configuration.
#[derive(Clone, Debug)]
pub enum Optimizer<T: Float> {
    Sgd(Sgd<T>),
    Adam(Adam<T>),
}

impl<T: Float> Optimizer<T> {
    pub fn from_config(cfg: &super::TrainConfig) -> Self {
        match cfg.optimizer {
            super::OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(cfg.momentum, cfg.weight_decay)),
            super::OptimizerKind::Adam => Optimizer::Adam(Adam::new(cfg.weight_decay)),
        }
    }

    pub fn step<M: Module<T> + ?Sized>(&mut self, module: &mut M, grads: &Gradients<T>, lr: f64) -> usize {
        match self {
            Optimizer::Sgd(o) => o.step(module, grads, lr),
            Optimizer::Adam(o) => o.step(module, grads, lr),
        }
    }
}
