//! SGD with momentum and Adam.

use std::collections::HashMap;

use num_traits::Float;

use super::{Result, TrainError};
use crate::nn::{ParamGrads, ParamId, ParamStore};

/// One SGD step on a flat buffer: `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_momentum_step<T: Float>(p: &mut [T], v: &mut [T], g: &[T], lr: T, momentum: T, weight_decay: T) {
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v + (g + weight_decay * *p);
        *p = *p - lr * *v;
    }
}

/// One bias-corrected Adam step; `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Float>(
    p: &mut [T],
    m: &mut [T],
    v: &mut [T],
    g: &[T],
    t: i32,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    weight_decay: T,
) {
    let one = T::one();
    let c1 = one - beta1.powi(t);
    let c2 = one - beta2.powi(t);
    for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
        let g = g + weight_decay * *p;
        *m = beta1 * *m + (one - beta1) * g;
        *v = beta2 * *v + (one - beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p = *p - lr * mh / (vh.sqrt() + eps);
    }
}

fn check_len(store: &ParamStore, id: ParamId, g: &[f32]) -> Result<()> {
    let e = store.entry(id);
    if e.value.numel() != g.len() {
        return Err(TrainError::GradShape {
            name: e.name.clone(),
            expected: e.value.numel(),
            found: g.len(),
        });
    }
    Ok(())
}

/// Parameter updates driven by [`ParamGrads`]. Parameters absent from the
/// gradient list are left untouched, weight decay included.
pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f32) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    /// Applied to weights and biases, not to normalization scale/shift.
    pub weight_decay: f32,
    velocity: HashMap<ParamId, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f32) -> Result<()> {
        for (id, g) in grads {
            check_len(store, *id, g)?;
            let wd = if store.entry(*id).kind.decays() { self.weight_decay } else { 0.0 };
            let v = self.velocity.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
            sgd_momentum_step(store.get_mut(*id).data_mut(), v, g, lr, self.momentum, wd);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    state: HashMap<ParamId, (i32, Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            state: HashMap::new(),
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8, 0.0)
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f32) -> Result<()> {
        for (id, g) in grads {
            check_len(store, *id, g)?;
            let wd = if store.entry(*id).kind.decays() { self.weight_decay } else { 0.0 };
            let (t, m, v) = self
                .state
                .entry(*id)
                .or_insert_with(|| (0, vec![0.0; g.len()], vec![0.0; g.len()]));
            *t += 1;
            adam_step(
                store.get_mut(*id).data_mut(),
                m,
                v,
                g,
                *t,
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                wd,
            );
        }
        Ok(())
    }
}
