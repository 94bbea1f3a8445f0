use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Which update rule a training loop uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    SgdMomentum,
    Adam,
}

/// Cosine annealing from `init` to `final` over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub init: f64,
    #[serde(rename = "final")]
    pub final_: f64,
}

impl LrSchedule {
    pub fn new(init: f64, final_: f64) -> Self {
        Self { init, final_ }
    }

    pub fn at(&self, step: usize, total: usize) -> f64 {
        cosine_lr(self.init, self.final_, step, total)
    }
}

pub fn cosine_lr(init: f64, final_: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return init;
    }
    let progress = (step as f64 / (total - 1) as f64).min(1.0);
    final_ + 0.5 * (init - final_) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Heavy-ball SGD.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T> {
    pub momentum: f64,
    velocity: Vec<T>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(len: usize, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: vec![T::zero(); len],
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        let (mu, lr) = (T::lit(self.momentum), T::lit(lr));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = mu * *v + *g;
            *p -= lr * *v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        self.t += 1;
        let b1 = T::lit(self.beta1);
        let b2 = T::lit(self.beta2);
        let c1 = T::lit(1.0 - self.beta1.powi(self.t));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let one = T::one();
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Optimizer state for one flat parameter vector.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd(SgdMomentum<T>),
    Adam(Adam<T>),
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        match kind {
            OptimizerKind::SgdMomentum => Optimizer::Sgd(SgdMomentum::new(len, 0.9)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(len)),
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T], lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads, lr),
            Optimizer::Adam(o) => o.step(params, grads, lr),
        }
    }
}
