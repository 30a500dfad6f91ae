use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::param::{join, Param, ParamVisitor, Parameterized};
use crate::lora::LoraAdapter;
use crate::real::{dot, Real};

/// Dense layer `y = W x + b`, optionally with a low-rank adapter added on top.
///
/// Weight layout `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub lora: Option<LoraAdapter<F>>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            fan_in,
            fan_out,
            weight: Param::he(&[fan_out, fan_in], fan_in, rng),
            bias: Param::zeros(&[fan_out]),
            lora: None,
        }
    }

    /// A layer whose weights start at zero.
    pub fn zeroed(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            fan_in,
            fan_out,
            weight: Param::zeros(&[fan_out, fan_in]),
            bias: Param::zeros(&[fan_out]),
            lora: None,
        }
    }

    pub fn forward(&self, x: &[F]) -> Vec<F> {
        assert_eq!(x.len(), self.fan_in, "linear input width mismatch");
        let mut y: Vec<F> = (0..self.fan_out)
            .map(|o| {
                dot(&self.weight.value[o * self.fan_in..(o + 1) * self.fan_in], x)
                    + self.bias.value[o]
            })
            .collect();
        if let Some(lora) = &self.lora {
            lora.add_forward(x, &mut y);
        }
        y
    }

    pub fn backward(&mut self, x: &[F], dy: &[F]) -> Vec<F> {
        let mut dx = vec![F::zero(); self.fan_in];
        for o in 0..self.fan_out {
            let g = dy[o];
            if g == F::zero() {
                continue;
            }
            let row = &self.weight.value[o * self.fan_in..(o + 1) * self.fan_in];
            for (d, &w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
            if self.weight.trainable {
                let grow = &mut self.weight.grad[o * self.fan_in..(o + 1) * self.fan_in];
                for (gw, &xi) in grow.iter_mut().zip(x) {
                    *gw += g * xi;
                }
            }
            if self.bias.trainable {
                self.bias.grad[o] += g;
            }
        }
        if let Some(lora) = &mut self.lora {
            lora.add_backward(x, dy, &mut dx);
        }
        dx
    }
}

impl<F: Real> Parameterized<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        v.visit(&join(prefix, "weight"), &mut self.weight);
        v.visit(&join(prefix, "bias"), &mut self.bias);
        if let Some(lora) = &mut self.lora {
            lora.visit_params(&join(prefix, "lora"), v);
        }
    }
}

/// ReLU on a vector, in place.
pub fn relu_vec<F: Real>(v: &mut [F]) {
    for x in v.iter_mut() {
        if *x < F::zero() {
            *x = F::zero();
        }
    }
}

/// Zero `dy` where the ReLU output was not positive.
pub fn relu_vec_backward<F: Real>(out: &[F], dy: &mut [F]) {
    for (g, &o) in dy.iter_mut().zip(out) {
        if o <= F::zero() {
            *g = F::zero();
        }
    }
}
