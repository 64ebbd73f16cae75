//! Optimizers (decoupled-weight-decay adaptive moments, SGD with momentum)
//! and the warmup + cosine learning-rate schedule.

use std::str::FromStr;

use crate::autodiff::{ParamStore, Real};
use crate::error::{Error, Result};

/// Which optimizer a training stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adamw" => Ok(OptimizerKind::AdamW),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?}; expected adamw|sgd"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Linear warmup 0 → base over `warmup_steps`, then half-cosine base → 0
/// across the remaining steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: u64, warmup_steps: u64) -> Result<Self> {
        if base_lr <= 0.0 || total_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::contract(format!(
                "schedule needs lr > 0 and warmup {warmup_steps} < total {total_steps}"
            )));
        }
        Ok(Schedule {
            base_lr,
            total_steps,
            warmup_steps,
        })
    }

    /// Learning rate for 0-based `step`; the final step lands at 0.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - 1).saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Adaptive-moments optimizer with decoupled weight decay:
/// p ← p·(1−lr·wd), then p ← p − lr·m̂/(√v̂+ε).
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay: T::from_f64(weight_decay),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update from the store's accumulated gradients. `t` is the 1-based
    /// step count driving bias correction.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T, t: u64) {
        if self.m.is_empty() {
            for (_, p) in store.iter() {
                self.m.push(vec![T::ZERO; p.value.len()]);
                self.v.push(vec![T::ZERO; p.value.len()]);
            }
        }
        let c1 = T::from_f64(1.0 - self.beta1.to_f64().powi(t as i32));
        let c2 = T::from_f64(1.0 - self.beta2.to_f64().powi(t as i32));
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.value.len() {
                let g = p.grad[k];
                p.value[k] = p.value[k] - lr * self.weight_decay * p.value[k];
                m[k] = self.beta1 * m[k] + (T::ONE - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (T::ONE - self.beta2) * g * g;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p.value[k] = p.value[k] - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers in store order (checkpointing).
    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// Install checkpointed moment buffers.
    pub fn restore_moments(&mut self, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        if m.len() != v.len() {
            return Err(Error::contract("moment buffer count mismatch"));
        }
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// SGD with classical momentum and coupled L2 decay:
/// v ← μ·v + (g + wd·p); p ← p − lr·v.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T: Real> {
    pub momentum: T,
    pub weight_decay: T,
    v: Vec<Vec<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum {
            momentum: T::from_f64(momentum),
            weight_decay: T::from_f64(weight_decay),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T) {
        if self.v.is_empty() {
            for (_, p) in store.iter() {
                self.v.push(vec![T::ZERO; p.value.len()]);
            }
        }
        for (i, (_, p)) in store.iter_mut().enumerate() {
            let v = &mut self.v[i];
            for k in 0..p.value.len() {
                let g = p.grad[k] + self.weight_decay * p.value[k];
                v[k] = self.momentum * v[k] + g;
                p.value[k] = p.value[k] - lr * v[k];
            }
        }
    }
}

/// Either optimizer behind one `step` call.
#[derive(Debug, Clone)]
pub enum Optimizer<T: Real> {
    AdamW(AdamW<T>),
    Sgd(SgdMomentum<T>),
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64, sgd_momentum: f64) -> Self {
        match kind {
            OptimizerKind::AdamW => Optimizer::AdamW(AdamW::new(weight_decay)),
            OptimizerKind::Sgd => Optimizer::Sgd(SgdMomentum::new(sgd_momentum, weight_decay)),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: T, t: u64) {
        match self {
            Optimizer::AdamW(o) => o.step(store, lr, t),
            Optimizer::Sgd(o) => o.step(store, lr),
        }
    }
}
