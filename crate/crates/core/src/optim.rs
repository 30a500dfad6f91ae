//! Cosine learning-rate schedule and AdamW.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::nn::{Param, Parameterized};
use crate::real::Real;

/// Cosine decay from `lr_init` at step 0 to exactly 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, lr_init: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return if step == 0 && total_steps == 0 { lr_init } else { 0.0 };
    }
    if step == 0 {
        return lr_init;
    }
    let t = step as f64 / total_steps as f64;
    0.5 * lr_init * (1.0 + (core::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are matched to
/// parameters by visiting order, so the parameter set must not change
/// between steps; frozen parameters are skipped but keep their slot.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update with learning rate `lr`, reading the accumulated gradients.
    pub fn update<F: Real, M: Parameterized<F> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut slot = 0usize;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params("", &mut |_: &str, p: &mut Param<F>| {
            if ms.len() <= slot {
                ms.push(alloc::vec![0.0; p.len()]);
                vs.push(alloc::vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[slot], &mut vs[slot]);
            slot += 1;
            if !p.trainable {
                return;
            }
            assert_eq!(m.len(), p.len(), "parameter set changed under the optimizer");
            for i in 0..p.len() {
                let g = p.grad[i].as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = p.value[i].as_f64();
                let w = w - lr * c.weight_decay * w - lr * mhat / (vhat.sqrt() + c.eps);
                p.value[i] = F::of(w);
            }
        });
    }
}
