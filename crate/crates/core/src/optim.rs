//! Poly learning-rate schedule and momentum SGD.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Role};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            base_lr: 1e-2,
            power: 0.9,
            max_iter: 1000,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.power.is_nan() || self.power <= 0.0 {
            return Err(Error::Config(format!("power must be > 0, got {}", self.power)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be > 0".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// `base_lr * (1 - (iter / max_iter) ^ power)`, zero from `max_iter` on.
pub fn poly_lr(iter: usize, sched: &TrainSchedule) -> f64 {
    if iter >= sched.max_iter {
        return 0.0;
    }
    let frac = iter as f64 / sched.max_iter as f64;
    sched.base_lr * (1.0 - frac.powf(sched.power))
}

/// Momentum SGD with L2 weight decay added to the gradient:
/// `v = momentum * v + (g + wd * p)`, `p -= lr * v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T: Element = f32> {
    pub velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new() -> Self {
        Sgd {
            velocity: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter that has a gradient; velocities
    /// start at zero.
    pub fn step(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for name in grads.keys() {
            match params.role(name) {
                Some(Role::Trainable) => {}
                Some(Role::Buffer) => return Err(Error::invalid(format!("gradient given for buffer `{name}`"))),
                None => return Err(Error::invalid(format!("gradient for unknown parameter `{name}`"))),
            }
        }
        let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {} does not match parameter `{name}` {}",
                    g.shape(),
                    p.shape()
                )));
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
