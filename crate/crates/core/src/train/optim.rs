//! AdamW with decoupled weight decay, global gradient-norm clipping and a
//! cosine-annealed learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound applied before each update; `None` disables
    /// clipping.
    pub clip_norm: Option<f64>,
}

impl AdamWConfig {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: Some(1.0),
        }
    }
}

/// First and second moment estimates for every parameter, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// Scales every gradient so the global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> Result<f64> {
    let norm = params.grad_norm();
    if !norm.is_finite() {
        let name = params
            .iter()
            .find(|p| !p.grad.is_finite())
            .map_or_else(String::new, |p| p.name.clone());
        return Err(Error::NonFiniteGradient(name));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    Ok(norm)
}

/// Clips (if configured), then applies
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)` with bias-corrected moments. Returns
/// the pre-clip gradient norm.
pub fn adamw_step(params: &mut ParamStore, st: &mut OptimState, lr: f64) -> Result<f64> {
    if st.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer state for {} parameters, store has {}",
            st.m.len(),
            params.len()
        )));
    }
    let c = st.config;
    let norm = match c.clip_norm {
        Some(max) => clip_grad_norm(params, max)?,
        None => {
            let n = params.grad_norm();
            if !n.is_finite() {
                return Err(Error::NonFiniteGradient("global norm".into()));
            }
            n
        }
    };
    st.step += 1;
    let bc1 = 1.0 - c.beta1.powi(st.step as i32);
    let bc2 = 1.0 - c.beta2.powi(st.step as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut st.m).zip(&mut st.v) {
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for (((w, &g), m), v) in values
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *w);
        }
    }
    Ok(norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub max_lr: f64,
    pub min_lr: f64,
    pub cycle_steps: usize,
}

impl Schedule {
    pub fn new(max_lr: f64, min_lr: f64, cycle_steps: usize) -> Result<Self> {
        if !(min_lr >= 0.0 && min_lr <= max_lr && max_lr.is_finite()) || cycle_steps == 0 {
            return Err(Error::ConfigInvalid(format!(
                "schedule needs 0 <= min_lr <= max_lr and a positive cycle (got {min_lr}, {max_lr}, {cycle_steps})"
            )));
        }
        Ok(Self {
            max_lr,
            min_lr,
            cycle_steps,
        })
    }
}

/// `min + ½(max − min)(1 + cos(π·step/cycle))`; steps past the cycle stay at
/// the minimum. Both endpoints are returned exactly.
pub fn cosine_lr(step: usize, sch: &Schedule) -> f64 {
    if step == 0 {
        return sch.max_lr;
    }
    if step >= sch.cycle_steps {
        return sch.min_lr;
    }
    let s = step as f64;
    sch.min_lr + 0.5 * (sch.max_lr - sch.min_lr) * (1.0 + (PI * s / sch.cycle_steps as f64).cos())
}
