//! Prompt-generated prediction head.
//!
//! `PredMlp` maps `[GAP(F_dense); E_T2]` to an embedding `E_Pred` and then to
//! a flat kernel vector θ, which parameterises three pointwise convolutions
//! over the decoder features:
//!
//! ```text
//! θ = [ W1 (C·H, index c·H + h) | b1 (H) | W2 (H·H, index i·H + j) | b2 (H) | w3 (H) | b3 ]
//! P = σ( w3 · g( W2ᵀ g( W1ᵀ F + b1 ) + b2 ) + b3 ),  g = ReLU
//! ```

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::linear::{relu_vec, relu_vec_backward};
use crate::nn::param::join;
use crate::nn::{Linear, ParamVisitor, Parameterized};
use crate::real::{sigmoid, Real};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub decoder_channels: usize,
    pub hidden: usize,
    pub dense_channels: usize,
    pub text_dim: usize,
    pub embed_dim: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            decoder_channels: 8,
            hidden: 8,
            dense_channels: 32,
            text_dim: crate::text::DEFAULT_TEXT_DIM,
            embed_dim: 128,
        }
    }
}

impl HeadConfig {
    /// Length of the flat θ vector.
    pub fn theta_len(&self) -> usize {
        let (c, h) = (self.decoder_channels, self.hidden);
        c * h + h + h * h + h + h + 1
    }
}

/// Flat kernel vector with named views.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<F> {
    pub c: usize,
    pub h: usize,
    pub theta: Vec<F>,
}

impl<F: Real> HeadParams<F> {
    pub fn new(c: usize, h: usize, theta: Vec<F>) -> Result<Self> {
        if theta.len() != c * h + h + h * h + h + h + 1 {
            return Err(Error::invalid(alloc::format!(
                "θ of length {} does not fit C={c}, H={h}",
                theta.len()
            )));
        }
        Ok(HeadParams { c, h, theta })
    }

    pub fn zeros(c: usize, h: usize) -> Self {
        HeadParams {
            c,
            h,
            theta: vec![F::zero(); c * h + h + h * h + h + h + 1],
        }
    }

    fn offsets(&self) -> [usize; 6] {
        let (c, h) = (self.c, self.h);
        let w1 = 0;
        let b1 = w1 + c * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + h;
        [w1, b1, w2, b2, w3, b3]
    }

    pub fn w1(&self) -> &[F] {
        let o = self.offsets();
        &self.theta[o[0]..o[1]]
    }
    pub fn b1(&self) -> &[F] {
        let o = self.offsets();
        &self.theta[o[1]..o[2]]
    }
    pub fn w2(&self) -> &[F] {
        let o = self.offsets();
        &self.theta[o[2]..o[3]]
    }
    pub fn b2(&self) -> &[F] {
        let o = self.offsets();
        &self.theta[o[3]..o[4]]
    }
    pub fn w3(&self) -> &[F] {
        let o = self.offsets();
        &self.theta[o[4]..o[5]]
    }
    pub fn b3(&self) -> F {
        self.theta[self.offsets()[5]]
    }
}

pub struct HeadCache<F> {
    h1: Vec<F>,
    h2: Vec<F>,
}

fn layer<F: Real>(
    input: &[F],
    cin: usize,
    n: usize,
    w: &[F],
    b: &[F],
    cout: usize,
) -> Vec<F> {
    let mut out = vec![F::zero(); cout * n];
    for o in 0..cout {
        let dst = &mut out[o * n..(o + 1) * n];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            crate::real::axpy(w[i * cout + o], &input[i * n..(i + 1) * n], dst);
        }
    }
    out
}

/// Logits of the three-layer pointwise head, with the activations needed
/// for the backward pass.
pub fn head_logits<F: Real>(
    f: &FeatureMap<F>,
    p: &HeadParams<F>,
) -> Result<(Vec<F>, HeadCache<F>)> {
    if f.channels != p.c {
        return Err(Error::invalid(alloc::format!(
            "head expects {} channels, got {}",
            p.c,
            f.channels
        )));
    }
    let n = f.nvox();
    let h = p.h;
    let mut h1 = layer(&f.data, p.c, n, p.w1(), p.b1(), h);
    relu_vec(&mut h1);
    let mut h2 = layer(&h1, h, n, p.w2(), p.b2(), h);
    relu_vec(&mut h2);
    let z = layer(&h2, h, n, p.w3(), &[p.b3()], 1);
    Ok((z, HeadCache { h1, h2 }))
}

/// Probability map `σ(logits)`, same spatial shape as `f`.
pub fn head_forward<F: Real>(f: &FeatureMap<F>, p: &HeadParams<F>) -> Result<Vec<F>> {
    let (z, _) = head_logits(f, p)?;
    Ok(z.into_iter().map(sigmoid).collect())
}

/// Gradients `(dF, dθ)` from the gradient w.r.t. the logits.
pub fn head_backward<F: Real>(
    f: &FeatureMap<F>,
    p: &HeadParams<F>,
    cache: &HeadCache<F>,
    dz: &[F],
) -> (FeatureMap<F>, Vec<F>) {
    let n = f.nvox();
    let (c, h) = (p.c, p.h);
    let o = p.offsets();
    let mut dtheta = vec![F::zero(); p.theta.len()];

    // layer 3
    dtheta[o[5]] = crate::real::sum(dz);
    let mut dh2 = vec![F::zero(); h * n];
    for j in 0..h {
        let a = &cache.h2[j * n..(j + 1) * n];
        dtheta[o[4] + j] = crate::real::dot(dz, a);
        crate::real::axpy(p.w3()[j], dz, &mut dh2[j * n..(j + 1) * n]);
    }
    relu_vec_backward(&cache.h2, &mut dh2);

    // layer 2
    let mut dh1 = vec![F::zero(); h * n];
    for j in 0..h {
        let g = &dh2[j * n..(j + 1) * n];
        dtheta[o[3] + j] = crate::real::sum(g);
        for i in 0..h {
            dtheta[o[2] + i * h + j] = crate::real::dot(g, &cache.h1[i * n..(i + 1) * n]);
            crate::real::axpy(p.w2()[i * h + j], g, &mut dh1[i * n..(i + 1) * n]);
        }
    }
    relu_vec_backward(&cache.h1, &mut dh1);

    // layer 1
    let mut df = FeatureMap::zeros(c, f.dims);
    for j in 0..h {
        let g = &dh1[j * n..(j + 1) * n];
        dtheta[o[1] + j] = crate::real::sum(g);
        for i in 0..c {
            dtheta[o[0] + i * h + j] = crate::real::dot(g, f.channel(i));
            crate::real::axpy(p.w1()[i * h + j], g, df.channel_mut(i));
        }
    }
    (df, dtheta)
}

/// `[GAP(F_dense); E_T2] → E_Pred → θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredMlp<F> {
    pub cfg: HeadConfig,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub proj: Linear<F>,
}

pub struct PredMlpCache<F> {
    x: Vec<F>,
    h1: Vec<F>,
    h2: Vec<F>,
}

impl<F: Real> PredMlp<F> {
    pub fn new<R: Rng + ?Sized>(cfg: HeadConfig, rng: &mut R) -> Self {
        let fan_in = cfg.dense_channels + cfg.text_dim;
        let mut proj = Linear::new(cfg.embed_dim, cfg.theta_len(), rng);
        proj.weight.value.iter_mut().for_each(|v| *v *= F::of(0.5));
        PredMlp {
            cfg,
            fc1: Linear::new(fan_in, cfg.embed_dim, rng),
            fc2: Linear::new(cfg.embed_dim, cfg.embed_dim, rng),
            proj,
        }
    }

    pub fn embed_cached(&self, e_t2: &[F], dense: &FeatureMap<F>) -> Result<(Vec<F>, PredMlpCache<F>)> {
        if e_t2.len() != self.cfg.text_dim || dense.channels != self.cfg.dense_channels {
            return Err(Error::invalid(alloc::format!(
                "pred MLP expects a {}-d prompt and {} dense channels, got {} and {}",
                self.cfg.text_dim,
                self.cfg.dense_channels,
                e_t2.len(),
                dense.channels
            )));
        }
        let mut x = dense.global_avg_pool();
        x.extend_from_slice(e_t2);
        let mut h1 = self.fc1.forward(&x);
        relu_vec(&mut h1);
        let mut h2 = self.fc2.forward(&h1);
        relu_vec(&mut h2);
        Ok((
            h2.clone(),
            PredMlpCache {
                x,
                h1,
                h2,
            },
        ))
    }

    /// Returns `(E_Pred, θ)` and the cache for [`PredMlp::backward`].
    pub fn forward_cached(
        &self,
        e_t2: &[F],
        dense: &FeatureMap<F>,
    ) -> Result<(Vec<F>, HeadParams<F>, PredMlpCache<F>)> {
        let (e, cache) = self.embed_cached(e_t2, dense)?;
        let theta = self.proj.forward(&e);
        let p = HeadParams::new(self.cfg.decoder_channels, self.cfg.hidden, theta)?;
        Ok((e, p, cache))
    }

    pub fn forward(&self, e_t2: &[F], dense: &FeatureMap<F>) -> Result<(Vec<F>, HeadParams<F>)> {
        self.forward_cached(e_t2, dense).map(|(e, p, _)| (e, p))
    }

    /// Accumulates gradients from `dθ`; returns the gradient w.r.t. the
    /// pooled dense features (length `dense_channels`), to be spread evenly
    /// over the bottleneck voxels by the caller via [`spread_pooled_grad`].
    pub fn backward(&mut self, cache: &PredMlpCache<F>, dtheta: &[F]) -> Vec<F> {
        let mut dh2 = self.proj.backward(&cache.h2, dtheta);
        relu_vec_backward(&cache.h2, &mut dh2);
        let mut dh1 = self.fc2.backward(&cache.h1, &dh2);
        relu_vec_backward(&cache.h1, &mut dh1);
        let dx = self.fc1.backward(&cache.x, &dh1);
        dx[..self.cfg.dense_channels].to_vec()
    }

    pub fn layer_names(&self) -> Vec<alloc::string::String> {
        ["pred.fc1", "pred.fc2", "pred.proj"].iter().map(|s| (*s).into()).collect()
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Linear<F>> {
        match name {
            "pred.fc1" => Some(&mut self.fc1),
            "pred.fc2" => Some(&mut self.fc2),
            "pred.proj" => Some(&mut self.proj),
            _ => None,
        }
    }
}

/// Gradient of global average pooling: every voxel of channel `c` receives
/// `d[c] / N`.
pub fn spread_pooled_grad<F: Real>(d: &[F], like: &FeatureMap<F>) -> FeatureMap<F> {
    let mut out = FeatureMap::zeros(like.channels, like.dims);
    let inv = F::one() / F::of_usize(like.nvox());
    for (c, &g) in d.iter().enumerate() {
        out.channel_mut(c).iter_mut().for_each(|v| *v = g * inv);
    }
    out
}

impl<F: Real> Parameterized<F> for PredMlp<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.fc1.visit_params(&join(prefix, "fc1"), v);
        self.fc2.visit_params(&join(prefix, "fc2"), v);
        self.proj.visit_params(&join(prefix, "proj"), v);
    }
}
