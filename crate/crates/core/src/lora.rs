//! Low-rank adapters on dense layers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DualPromptModel;
use crate::nn::param::{join, Param, ParamVisitor, Parameterized};
use crate::real::{dot, Real};

/// Additive low-rank update `(α / r) · B · A` on a frozen dense layer.
///
/// `A` is `rank × in` with a small random init, `B` is `out × rank` and
/// starts at zero so a freshly attached adapter leaves the layer unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<F> {
    pub rank: usize,
    pub alpha: f64,
    pub a: Param<F>,
    pub b: Param<F>,
}

impl<F: Real> LoraAdapter<F> {
    pub fn new<R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        LoraAdapter {
            rank,
            alpha,
            a: Param::normal(&[rank, fan_in], 1.0 / num_traits::Float::sqrt(fan_in as f64), rng),
            b: Param::zeros(&[fan_out, rank]),
        }
    }

    pub fn scale(&self) -> F {
        F::of(self.alpha / self.rank as f64)
    }

    fn project(&self, x: &[F]) -> Vec<F> {
        let n = x.len();
        (0..self.rank)
            .map(|j| dot(&self.a.value[j * n..(j + 1) * n], x))
            .collect()
    }

    pub fn add_forward(&self, x: &[F], y: &mut [F]) {
        let u = self.project(x);
        let s = self.scale();
        for (o, yo) in y.iter_mut().enumerate() {
            let t = s * dot(&self.b.value[o * self.rank..(o + 1) * self.rank], &u);
            // Skipping exact zeros keeps a fresh adapter bit-transparent
            // (a signed zero sum would otherwise turn -0.0 into +0.0).
            if t != F::zero() {
                *yo += t;
            }
        }
    }

    pub fn add_backward(&mut self, x: &[F], dy: &[F], dx: &mut [F]) {
        let n = x.len();
        let s = self.scale();
        let u = self.project(x);
        let mut du = vec![F::zero(); self.rank];
        for (o, &g) in dy.iter().enumerate() {
            if g == F::zero() {
                continue;
            }
            for j in 0..self.rank {
                du[j] += s * g * self.b.value[o * self.rank + j];
                if self.b.trainable {
                    self.b.grad[o * self.rank + j] += s * g * u[j];
                }
            }
        }
        for j in 0..self.rank {
            let row = &self.a.value[j * n..(j + 1) * n];
            for (d, &a) in dx.iter_mut().zip(row) {
                *d += du[j] * a;
            }
            if self.a.trainable {
                let grow = &mut self.a.grad[j * n..(j + 1) * n];
                for (g, &xi) in grow.iter_mut().zip(x) {
                    *g += du[j] * xi;
                }
            }
        }
    }

    /// The dense `out × in` matrix this adapter adds to its layer.
    pub fn delta(&self) -> Vec<F> {
        let fan_in = self.a.shape[1];
        let fan_out = self.b.shape[0];
        let s = self.scale();
        let mut d = vec![F::zero(); fan_out * fan_in];
        for o in 0..fan_out {
            for i in 0..fan_in {
                let mut acc = F::zero();
                for j in 0..self.rank {
                    acc += self.b.value[o * self.rank + j] * self.a.value[j * fan_in + i];
                }
                d[o * fan_in + i] = s * acc;
            }
        }
        d
    }
}

impl<F: Real> Parameterized<F> for LoraAdapter<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        v.visit(&join(prefix, "a"), &mut self.a);
        v.visit(&join(prefix, "b"), &mut self.b);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 8.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraReport {
    pub layers: Vec<String>,
    pub trainable: usize,
    pub total: usize,
    pub fraction: f64,
}

/// Attach adapters to the named dense layers and freeze everything else.
///
/// Only adapter matrices and, if attached, the prognosis head stay
/// trainable. Layers are validated before anything is modified, so an
/// unknown name leaves the model untouched.
pub fn apply_lora<F: Real>(
    model: &mut DualPromptModel<F>,
    layers: &[&str],
    cfg: &LoraConfig,
) -> Result<LoraReport> {
    if cfg.rank == 0 || !(cfg.alpha.is_finite()) {
        return Err(Error::invalid("adapter rank must be positive and alpha finite"));
    }
    for name in layers {
        match model.linear_layer_mut(name) {
            None => return Err(Error::InvalidArgument(alloc::format!("unknown layer `{name}`"))),
            Some(l) if l.lora.is_some() => {
                return Err(Error::InvalidArgument(alloc::format!("layer `{name}` already has an adapter")))
            }
            Some(_) => {}
        }
    }
    model.set_trainable(false);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for name in layers {
        let l = model.linear_layer_mut(name).expect("checked above");
        l.lora = Some(LoraAdapter::new(l.fan_in, l.fan_out, cfg.rank, cfg.alpha, &mut rng));
    }
    if let Some(h) = &mut model.prognosis {
        h.set_trainable(true);
    }
    Ok(lora_report(model))
}

/// Trainable versus total parameter counts, and the adapted layers.
pub fn lora_report<F: Real>(model: &mut DualPromptModel<F>) -> LoraReport {
    let layers: Vec<String> = model
        .linear_layer_names()
        .into_iter()
        .filter(|n| model.linear_layer_mut(n).is_some_and(|l| l.lora.is_some()))
        .collect();
    let trainable = model.trainable_count();
    let total = model.param_count();
    LoraReport {
        layers,
        trainable,
        total,
        fraction: trainable as f64 / total.max(1) as f64,
    }
}

/// Detach every adapter and mark all base parameters trainable again.
pub fn remove_lora<F: Real>(model: &mut DualPromptModel<F>) {
    for name in model.linear_layer_names() {
        if let Some(l) = model.linear_layer_mut(&name) {
            l.lora = None;
        }
    }
    model.set_trainable(true);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::prognosis::PrognosisHead;

    #[test]
    fn default_config_fraction_is_small() {
        let mut m = DualPromptModel::<f32>::new(ModelConfig::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        m.prognosis = Some(PrognosisHead::new(m.cfg.backbone.dense_channels(), 64, 8, &mut rng));
        let names = m.film.layer_names();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        let r = apply_lora(&mut m, &refs, &LoraConfig::default()).unwrap();
        assert_eq!(r.layers, names);
        assert!(r.fraction < 0.05, "{r:?}");
        assert!(r.trainable > 0);
    }

    #[test]
    fn unknown_layer_is_rejected_without_side_effects() {
        let mut m = DualPromptModel::<f32>::new(ModelConfig::default(), 1).unwrap();
        let before = m.clone();
        let e = apply_lora(&mut m, &["film.trunk1", "backbone.down0"], &LoraConfig::default());
        assert!(matches!(e, Err(Error::InvalidArgument(_))));
        assert_eq!(m, before);
    }

    #[test]
    fn fresh_adapter_is_transparent_and_removable() {
        let mut m = DualPromptModel::<f32>::new(ModelConfig::default(), 3).unwrap();
        let e = m.embed("a computed tomography of abdomen").unwrap();
        let base = m.film.forward(&e).flatten();
        apply_lora(&mut m, &["film.trunk1", "film.head0"], &LoraConfig::default()).unwrap();
        let adapted = m.film.forward(&e).flatten();
        assert!(base.iter().zip(&adapted).all(|(a, b)| a.to_bits() == b.to_bits()));
        m.film.trunk1.lora.as_mut().unwrap().b.value.fill(0.5);
        assert_ne!(m.film.forward(&e).flatten(), base);
        remove_lora(&mut m);
        let restored = m.film.forward(&e).flatten();
        assert!(base.iter().zip(&restored).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
