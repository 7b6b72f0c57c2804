use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::param::ParamSet;
use super::tensor::{Real, Tensor5};
use crate::error::{Error, Result};

/// First and second moment buffers of one param.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor5<T>,
    pub v: Tensor5<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed steps.
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update of every non-frozen param, consuming the
/// accumulated gradients. Frozen params are left untouched.
pub fn adam_step<T: Real>(
    params: &mut ParamSet<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    if let Some(p) = params.iter().find(|p| !p.frozen && p.grad.is_none()) {
        return Err(Error::Gradient(format!("missing gradient for {}", p.name)));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (tb1, tb2, teps) = (T::of(b1), T::of(b2), T::of(state.eps));
    let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let (step_size, inv_c2) = (T::of(lr / c1), T::of(1.0 / c2));

    for p in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let grad = p.grad.take().expect("checked above");
        let mom = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| Moments {
                m: Tensor5::zeros(p.value.shape()),
                v: Tensor5::zeros(p.value.shape()),
            });
        let values = p.value.data_mut();
        let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
        for i in 0..values.len() {
            let g = grad.data()[i];
            m[i] = tb1 * m[i] + one_b1 * g;
            v[i] = tb2 * v[i] + one_b2 * g * g;
            values[i] -= step_size * m[i] / ((v[i] * inv_c2).sqrt() + teps);
        }
    }
    Ok(())
}

/// Step-decay learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleCfg {
    pub lr0: f64,
    pub decay: f64,
    pub period: u64,
    pub floor: f64,
}

impl ScheduleCfg {
    pub fn new(lr0: f64, decay: f64, period: u64, floor: f64) -> Result<Self> {
        let cfg = Self {
            lr0,
            decay,
            period,
            floor,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay < 1.0)
            || self.period == 0
            || self.floor > self.lr0
            || self.floor < 0.0
        {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    /// 0.001, ×0.95 every 200 steps, floor 1e-4.
    pub fn rem_default() -> Self {
        Self {
            lr0: 1e-3,
            decay: 0.95,
            period: 200,
            floor: 1e-4,
        }
    }

    /// 0.002, ×0.9 every 1000 steps, floor 1e-4.
    pub fn cascade_default() -> Self {
        Self {
            lr0: 2e-3,
            decay: 0.9,
            period: 1000,
            floor: 1e-4,
        }
    }
}

/// `max(floor, lr0 · decay^(iter / period))` with integer division.
pub fn lr_schedule(iter: u64, cfg: &ScheduleCfg) -> f64 {
    let k = iter / cfg.period;
    let lr = cfg.lr0 * cfg.decay.powf(k as f64);
    lr.max(cfg.floor)
}
