//! FiLM-conditioned 3D encoder/decoder.
//!
//! Layout for `levels = L` and widths `w_l = base · 2^l`:
//!
//! ```text
//! stem[modality]: conv → GN → ReLU → conv → GN → ReLU                 (w_0)
//! down j < L-1:   conv → GN → ReLU → conv → GN → FiLM → ReLU → skip_j  (w_j)
//!                 2×2×2 stride-2 conv                                  (w_{j+1})
//! bottleneck:     conv → GN → ReLU → conv → GN → FiLM → ReLU = F_dense (w_{L-1})
//! up l = L-2..0:  upsample ×2 ‖ skip_l → conv → GN → ReLU
//!                 → conv → GN → FiLM → ReLU                            (w_l)
//! ```
//!
//! FiLM blocks are numbered down blocks first, then the bottleneck, then
//! the up blocks from deep to shallow, so the default three-level network
//! has FiLM widths 8/16/32/16/8.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::film::{film, film_backward};
use crate::nn::linear::{relu_vec, relu_vec_backward};
use crate::nn::norm::GroupNormCache;
use crate::nn::param::join;
use crate::nn::upsample::{upsample2, upsample2_backward};
use crate::nn::{relu, relu_backward, Conv3d, DownConv, GroupNorm, Linear, ParamVisitor, Parameterized};
use crate::real::Real;
use crate::tensor::{Dims, FeatureMap};
use crate::volume::Modality;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub patch: Dims,
    pub norm_groups: usize,
    pub text_dim: usize,
    pub film_hidden: usize,
    /// `γ = 1 + γ̂` when set, `γ = γ̂` otherwise.
    pub residual_film: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            levels: 3,
            base_channels: 8,
            patch: Dims::cube(32),
            norm_groups: 4,
            text_dim: crate::text::DEFAULT_TEXT_DIM,
            film_hidden: 128,
            residual_film: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 || self.base_channels < 1 || self.norm_groups < 1 {
            return Err(Error::Configuration("levels, channels and groups must be positive".into()));
        }
        // Norm layers use min(groups, width) groups, which must divide the width.
        if let Some(w) = (0..self.levels)
            .map(|i| self.width(i))
            .find(|&w| w % self.norm_groups.min(w) != 0)
        {
            return Err(Error::Configuration(alloc::format!(
                "width {w} does not split into {} norm groups",
                self.norm_groups
            )));
        }
        if self.text_dim < 1 || self.film_hidden < 1 {
            return Err(Error::Configuration("text and FiLM widths must be positive".into()));
        }
        let f = 1usize << (self.levels - 1);
        if self.patch.0.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Configuration(alloc::format!(
                "patch {:?} is not divisible by {f}",
                self.patch.0
            )));
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel width of every FiLM block in block order.
    pub fn film_widths(&self) -> Vec<usize> {
        let l = self.levels;
        let mut w: Vec<usize> = (0..l).map(|i| self.width(i)).collect();
        w.extend((0..l - 1).rev().map(|i| self.width(i)));
        w
    }

    pub fn decoder_channels(&self) -> usize {
        self.width(0)
    }

    pub fn dense_channels(&self) -> usize {
        self.width(self.levels - 1)
    }

    pub fn dense_dims(&self) -> Dims {
        let f = 1usize << (self.levels - 1);
        Dims([self.patch.0[0] / f, self.patch.0[1] / f, self.patch.0[2] / f])
    }
}

/// Per-block (γ, β) in FiLM block order.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParamSet<F> {
    pub gammas: Vec<Vec<F>>,
    pub betas: Vec<Vec<F>>,
}

impl<F: Real> FilmParamSet<F> {
    pub fn identity(widths: &[usize]) -> Self {
        FilmParamSet {
            gammas: widths.iter().map(|&w| alloc::vec![F::one(); w]).collect(),
            betas: widths.iter().map(|&w| alloc::vec![F::zero(); w]).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.gammas.iter().chain(&self.betas).flatten().all(|v| v.is_finite())
    }

    /// All values as one vector (γ then β per block).
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        for (g, b) in self.gammas.iter().zip(&self.betas) {
            out.extend_from_slice(g);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Shared two-layer trunk on the T1 embedding with one linear head per
/// FiLM block emitting `[γ̂; β]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmMlp<F> {
    pub trunk1: Linear<F>,
    pub trunk2: Linear<F>,
    pub heads: Vec<Linear<F>>,
    pub residual: bool,
}

pub struct FilmMlpCache<F> {
    x: Vec<F>,
    h1: Vec<F>,
    h2: Vec<F>,
}

impl<F: Real> FilmMlp<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let hidden = cfg.film_hidden;
        let mut heads: Vec<Linear<F>> = cfg
            .film_widths()
            .iter()
            .map(|&w| Linear::new(hidden, 2 * w, rng))
            .collect();
        // Start close to the identity modulation.
        for h in &mut heads {
            h.weight.value.iter_mut().for_each(|v| *v *= F::of(0.1));
            if !cfg.residual_film {
                let w = h.fan_out / 2;
                h.bias.value[..w].iter_mut().for_each(|v| *v = F::one());
            }
        }
        FilmMlp {
            trunk1: Linear::new(cfg.text_dim, hidden, rng),
            trunk2: Linear::new(hidden, hidden, rng),
            heads,
            residual: cfg.residual_film,
        }
    }

    /// Zero every projection head: the residual form then yields γ = 1, β = 0.
    pub fn zero_heads(&mut self) {
        for h in &mut self.heads {
            h.weight.value.iter_mut().for_each(|v| *v = F::zero());
            h.bias.value.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn forward_cached(&self, e: &[F]) -> (FilmParamSet<F>, FilmMlpCache<F>) {
        let mut h1 = self.trunk1.forward(e);
        relu_vec(&mut h1);
        let mut h2 = self.trunk2.forward(&h1);
        relu_vec(&mut h2);
        let mut gammas = Vec::with_capacity(self.heads.len());
        let mut betas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let out = head.forward(&h2);
            let w = out.len() / 2;
            let mut g = out[..w].to_vec();
            if self.residual {
                g.iter_mut().for_each(|v| *v += F::one());
            }
            gammas.push(g);
            betas.push(out[w..].to_vec());
        }
        (
            FilmParamSet { gammas, betas },
            FilmMlpCache {
                x: e.to_vec(),
                h1,
                h2,
            },
        )
    }

    pub fn forward(&self, e: &[F]) -> FilmParamSet<F> {
        self.forward_cached(e).0
    }

    /// Accumulates gradients; returns the gradient w.r.t. the embedding.
    pub fn backward(&mut self, cache: &FilmMlpCache<F>, grads: &FilmParamSet<F>) -> Vec<F> {
        let mut dh2 = alloc::vec![F::zero(); cache.h2.len()];
        for (k, head) in self.heads.iter_mut().enumerate() {
            let mut dout = grads.gammas[k].clone();
            dout.extend_from_slice(&grads.betas[k]);
            let d = head.backward(&cache.h2, &dout);
            for (a, b) in dh2.iter_mut().zip(d) {
                *a += b;
            }
        }
        relu_vec_backward(&cache.h2, &mut dh2);
        let mut dh1 = self.trunk2.backward(&cache.h1, &dh2);
        relu_vec_backward(&cache.h1, &mut dh1);
        self.trunk1.backward(&cache.x, &dh1)
    }

    /// Names of the dense layers, usable as adapter targets.
    pub fn layer_names(&self) -> Vec<String> {
        let mut v = alloc::vec![String::from("film.trunk1"), String::from("film.trunk2")];
        v.extend((0..self.heads.len()).map(|k| alloc::format!("film.head{k}")));
        v
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Linear<F>> {
        match name {
            "film.trunk1" => Some(&mut self.trunk1),
            "film.trunk2" => Some(&mut self.trunk2),
            _ => {
                let k: usize = name.strip_prefix("film.head")?.parse().ok()?;
                self.heads.get_mut(k)
            }
        }
    }
}

impl<F: Real> Parameterized<F> for FilmMlp<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.trunk1.visit_params(&join(prefix, "trunk1"), v);
        self.trunk2.visit_params(&join(prefix, "trunk2"), v);
        for (k, h) in self.heads.iter_mut().enumerate() {
            h.visit_params(&join(prefix, &alloc::format!("head{k}")), v);
        }
    }
}

/// Two 3×3×3 convolutions with group norm; optional FiLM after the second
/// norm, ReLU after both.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<F> {
    pub conv1: Conv3d<F>,
    pub gn1: GroupNorm<F>,
    pub conv2: Conv3d<F>,
    pub gn2: GroupNorm<F>,
}

pub struct ConvBlockCache<F> {
    x: FeatureMap<F>,
    gn1: GroupNormCache<F>,
    a1: FeatureMap<F>,
    gn2: GroupNormCache<F>,
    n2: FeatureMap<F>,
    out: FeatureMap<F>,
}

impl<F: Real> ConvBlock<F> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, groups: usize, rng: &mut R) -> Self {
        ConvBlock {
            conv1: Conv3d::new(cin, cout, rng),
            gn1: GroupNorm::new(groups, cout),
            conv2: Conv3d::new(cout, cout, rng),
            gn2: GroupNorm::new(groups, cout),
        }
    }

    pub fn forward(
        &self,
        x: &FeatureMap<F>,
        mods: Option<(&[F], &[F])>,
    ) -> Result<(FeatureMap<F>, ConvBlockCache<F>)> {
        let (n1, gn1) = self.gn1.forward(&self.conv1.forward(x));
        let a1 = relu(&n1);
        let (n2, gn2) = self.gn2.forward(&self.conv2.forward(&a1));
        let out = match mods {
            Some((g, b)) => relu(&film(&n2, g, b)?),
            None => relu(&n2),
        };
        Ok((
            out.clone(),
            ConvBlockCache {
                x: x.clone(),
                gn1,
                a1,
                gn2,
                n2,
                out,
            },
        ))
    }

    pub fn is_trainable(&self) -> bool {
        self.conv1.weight.trainable
            || self.conv2.weight.trainable
            || [&self.gn1, &self.gn2].iter().any(|g| g.weight.trainable || g.bias.trainable)
    }

    /// Returns `(dx, dγ, dβ)`; the FiLM gradients are empty without FiLM.
    pub fn backward(
        &mut self,
        cache: &ConvBlockCache<F>,
        dout: &FeatureMap<F>,
        gamma: Option<&[F]>,
        want_dx: bool,
    ) -> (Option<FeatureMap<F>>, Vec<F>, Vec<F>) {
        let mut d = dout.clone();
        relu_backward(&cache.out, &mut d);
        let (dn2, dg, db) = match gamma {
            Some(g) => film_backward(&cache.n2, g, &d),
            None => (d, Vec::new(), Vec::new()),
        };
        let dh2 = self.gn2.backward(&cache.gn2, &dn2);
        let mut da1 = self.conv2.backward(&cache.a1, &dh2, true).expect("dx requested");
        relu_backward(&cache.a1, &mut da1);
        let dh1 = self.gn1.backward(&cache.gn1, &da1);
        let dx = self.conv1.backward(&cache.x, &dh1, want_dx);
        (dx, dg, db)
    }
}

impl<F: Real> Parameterized<F> for ConvBlock<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.conv1.visit_params(&join(prefix, "conv1"), v);
        self.gn1.visit_params(&join(prefix, "gn1"), v);
        self.conv2.visit_params(&join(prefix, "conv2"), v);
        self.gn2.visit_params(&join(prefix, "gn2"), v);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<F> {
    pub cfg: BackboneConfig,
    /// One stem per modality, indexed by [`Modality::index`].
    pub stems: Vec<ConvBlock<F>>,
    pub down: Vec<ConvBlock<F>>,
    pub pools: Vec<DownConv<F>>,
    pub bottleneck: ConvBlock<F>,
    /// Ordered deep to shallow.
    pub up: Vec<ConvBlock<F>>,
}

pub struct BackboneOutput<F> {
    /// Full-resolution decoder features.
    pub decoder: FeatureMap<F>,
    /// Bottleneck features.
    pub dense: FeatureMap<F>,
}

pub struct BackboneCache<F> {
    modality: usize,
    stem: ConvBlockCache<F>,
    down: Vec<ConvBlockCache<F>>,
    pool_in: Vec<FeatureMap<F>>,
    bottleneck: ConvBlockCache<F>,
    up: Vec<ConvBlockCache<F>>,
}

impl<F: Real> Backbone<F> {
    pub fn new<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let g = cfg.norm_groups;
        let l = cfg.levels;
        let stems = Modality::ALL
            .iter()
            .map(|_| ConvBlock::new(1, cfg.width(0), g, rng))
            .collect();
        let down = (0..l - 1)
            .map(|j| ConvBlock::new(cfg.width(j), cfg.width(j), g, rng))
            .collect();
        let pools = (0..l - 1)
            .map(|j| DownConv::new(cfg.width(j), cfg.width(j + 1), rng))
            .collect();
        let bottleneck = ConvBlock::new(cfg.width(l - 1), cfg.width(l - 1), g, rng);
        let up = (0..l - 1)
            .rev()
            .map(|i| ConvBlock::new(cfg.width(i + 1) + cfg.width(i), cfg.width(i), g, rng))
            .collect();
        Ok(Backbone {
            cfg: cfg.clone(),
            stems,
            down,
            pools,
            bottleneck,
            up,
        })
    }

    fn check_input(&self, x: &FeatureMap<F>) -> Result<()> {
        let f = 1usize << (self.cfg.levels - 1);
        if x.channels != 1 || x.dims.0.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::invalid(alloc::format!(
                "backbone input must be one channel with dims divisible by {f}, got {}×{:?}",
                x.channels,
                x.dims.0
            )));
        }
        Ok(())
    }

    /// Runs the encoder and, when `decode`, the up path; the decoder
    /// features are `None` otherwise.
    fn run(
        &self,
        x: &FeatureMap<F>,
        modality: Modality,
        film: Option<&FilmParamSet<F>>,
        decode: bool,
    ) -> Result<(Option<FeatureMap<F>>, FeatureMap<F>, BackboneCache<F>)> {
        self.check_input(x)?;
        if let Some(p) = film {
            let widths = self.cfg.film_widths();
            let ok = p.gammas.len() == widths.len()
                && p.betas.len() == widths.len()
                && widths
                    .iter()
                    .enumerate()
                    .all(|(k, &w)| p.gammas[k].len() == w && p.betas[k].len() == w);
            if !ok {
                return Err(Error::invalid("FiLM parameter set does not match the backbone widths"));
            }
        }
        let mods = |k: usize| film.map(|p| (p.gammas[k].as_slice(), p.betas[k].as_slice()));
        let l = self.cfg.levels;
        let (mut h, stem) = self.stems[modality.index()].forward(x, None)?;
        let mut down = Vec::with_capacity(l - 1);
        let mut pool_in = Vec::with_capacity(l - 1);
        let mut skips = Vec::with_capacity(l - 1);
        for j in 0..l - 1 {
            let (s, c) = self.down[j].forward(&h, mods(j))?;
            h = self.pools[j].forward(&s);
            skips.push(s.clone());
            pool_in.push(s);
            down.push(c);
        }
        let (dense, bottleneck) = self.bottleneck.forward(&h, mods(l - 1))?;
        let mut h = dense.clone();
        let mut up = Vec::with_capacity(l - 1);
        for (k, block) in self.up.iter().enumerate().take_while(|_| decode) {
            let level = l - 2 - k;
            let cat = FeatureMap::concat(&upsample2(&h), &skips[level]);
            let (o, c) = block.forward(&cat, mods(l + k))?;
            h = o;
            up.push(c);
        }
        Ok((
            decode.then_some(h),
            dense,
            BackboneCache {
                modality: modality.index(),
                stem,
                down,
                pool_in,
                bottleneck,
                up,
            },
        ))
    }

    pub fn forward_cached(
        &self,
        x: &FeatureMap<F>,
        modality: Modality,
        film: &FilmParamSet<F>,
    ) -> Result<(BackboneOutput<F>, BackboneCache<F>)> {
        let (decoder, dense, cache) = self.run(x, modality, Some(film), true)?;
        let decoder = decoder.expect("decoded");
        Ok((BackboneOutput { decoder, dense }, cache))
    }

    /// Bottleneck features only; the up path is skipped. The cache supports
    /// [`Backbone::backward`] with a bottleneck gradient alone.
    pub fn encode_cached(
        &self,
        x: &FeatureMap<F>,
        modality: Modality,
        film: &FilmParamSet<F>,
    ) -> Result<(FeatureMap<F>, BackboneCache<F>)> {
        self.run(x, modality, Some(film), false).map(|(_, dense, cache)| (dense, cache))
    }

    pub fn encode(&self, x: &FeatureMap<F>, modality: Modality, film: &FilmParamSet<F>) -> Result<FeatureMap<F>> {
        self.encode_cached(x, modality, film).map(|(dense, _)| dense)
    }

    pub fn forward(
        &self,
        x: &FeatureMap<F>,
        modality: Modality,
        film: &FilmParamSet<F>,
    ) -> Result<BackboneOutput<F>> {
        self.forward_cached(x, modality, film).map(|(o, _)| o)
    }

    /// The same network with every FiLM layer removed.
    pub fn forward_without_film(&self, x: &FeatureMap<F>, modality: Modality) -> Result<BackboneOutput<F>> {
        let (decoder, dense, _) = self.run(x, modality, None, true)?;
        Ok(BackboneOutput {
            decoder: decoder.expect("decoded"),
            dense,
        })
    }

    /// Back-propagate gradients w.r.t. the decoder features and the
    /// bottleneck; accumulates parameter gradients and returns the FiLM
    /// parameter gradients.
    pub fn backward(
        &mut self,
        cache: &BackboneCache<F>,
        film: &FilmParamSet<F>,
        d_decoder: Option<&FeatureMap<F>>,
        d_dense: Option<&FeatureMap<F>>,
    ) -> FilmParamSet<F> {
        let l = self.cfg.levels;
        let widths = self.cfg.film_widths();
        let mut dg: Vec<Vec<F>> = widths.iter().map(|&w| alloc::vec![F::zero(); w]).collect();
        let mut db = dg.clone();
        let mut dskips: Vec<Option<FeatureMap<F>>> = (0..l - 1).map(|_| None).collect();

        // Without a decoder gradient the up path contributes nothing.
        let d = match d_decoder {
            Some(dd) => {
                assert_eq!(cache.up.len(), l - 1, "decoder gradient needs a decoded forward");
                let mut d = dd.clone();
                for k in (0..l - 1).rev() {
                    let level = l - 2 - k;
                    let (dcat, g, b) =
                        self.up[k].backward(&cache.up[k], &d, Some(&film.gammas[l + k]), true);
                    dg[l + k] = g;
                    db[l + k] = b;
                    let c_up = self.cfg.width(level + 1);
                    let (dup, dskip) = dcat.expect("dx requested").split_channels(c_up);
                    dskips[level] = Some(dskip);
                    d = upsample2_backward(&dup);
                }
                if let Some(dd) = d_dense {
                    d.add_assign(dd);
                }
                d
            }
            None => match d_dense {
                Some(dd) => dd.clone(),
                None => return FilmParamSet { gammas: dg, betas: db },
            },
        };
        let (dh, g, b) =
            self.bottleneck
                .backward(&cache.bottleneck, &d, Some(&film.gammas[l - 1]), true);
        dg[l - 1] = g;
        db[l - 1] = b;
        let mut d = dh.expect("dx requested");
        // A frozen stem needs no gradient, so nothing below the first down
        // block is propagated.
        let stem_trainable = self.stems[cache.modality].is_trainable();
        for j in (0..l - 1).rev() {
            let mut ds = self.pools[j]
                .backward(&cache.pool_in[j], &d, true)
                .expect("dx requested");
            if let Some(s) = &dskips[j] {
                ds.add_assign(s);
            }
            let want_dx = j > 0 || stem_trainable;
            let (dh, g, b) = self.down[j].backward(&cache.down[j], &ds, Some(&film.gammas[j]), want_dx);
            dg[j] = g;
            db[j] = b;
            match dh {
                Some(dh) => d = dh,
                None => return FilmParamSet { gammas: dg, betas: db },
            }
        }
        if stem_trainable {
            self.stems[cache.modality].backward(&cache.stem, &d, None, false);
        }
        FilmParamSet {
            gammas: dg,
            betas: db,
        }
    }
}

impl<F: Real> Parameterized<F> for Backbone<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        for (m, s) in Modality::ALL.iter().zip(self.stems.iter_mut()) {
            s.visit_params(&join(prefix, &alloc::format!("stem.{}", m.as_str())), v);
        }
        for (j, b) in self.down.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &alloc::format!("down{j}")), v);
        }
        for (j, p) in self.pools.iter_mut().enumerate() {
            p.visit_params(&join(prefix, &alloc::format!("pool{j}")), v);
        }
        self.bottleneck.visit_params(&join(prefix, "bottleneck"), v);
        for (k, b) in self.up.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &alloc::format!("up{k}")), v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            levels: 2,
            base_channels: 2,
            patch: Dims::cube(4),
            norm_groups: 4,
            text_dim: 6,
            film_hidden: 5,
            residual_film: true,
        }
    }

    #[test]
    fn film_widths_default() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.film_widths(), alloc::vec![8, 16, 32, 16, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = FilmMlp::<f32>::new(&cfg, &mut rng);
        let e = alloc::vec![0.1f32; cfg.text_dim];
        let p = mlp.forward(&e);
        let lens: Vec<usize> = p.gammas.iter().zip(&p.betas).map(|(g, b)| g.len() + b.len()).collect();
        assert_eq!(lens, alloc::vec![16, 32, 64, 32, 16]);
        mlp.zero_heads();
        let p = mlp.forward(&e);
        assert!(p.gammas.iter().flatten().all(|&g| g == 1.0));
        assert!(p.betas.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn shapes() {
        let cfg = BackboneConfig {
            patch: Dims::cube(16),
            ..BackboneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bb = Backbone::<f32>::new(&cfg, &mut rng).unwrap();
        let x = FeatureMap::zeros(1, cfg.patch);
        let id = FilmParamSet::identity(&cfg.film_widths());
        let out = bb.forward(&x, Modality::Ct, &id).unwrap();
        assert_eq!(out.decoder.dims, cfg.patch);
        assert_eq!(out.decoder.channels, 8);
        assert_eq!(out.dense.dims, Dims::cube(4));
        assert_eq!(out.dense.channels, 32);
        let bad = FeatureMap::zeros(1, Dims::cube(6));
        assert!(matches!(bb.forward(&bad, Modality::Ct, &id), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn rejects_indivisible_patch() {
        let cfg = BackboneConfig {
            patch: Dims::cube(30),
            ..BackboneConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identity_film_matches_film_free() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bb = Backbone::<f64>::new(&cfg, &mut rng).unwrap();
        let x = FeatureMap::from_vec(
            1,
            cfg.patch,
            (0..64).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect(),
        )
        .unwrap();
        let id = FilmParamSet::identity(&cfg.film_widths());
        let a = bb.forward(&x, Modality::Mr, &id).unwrap();
        let b = bb.forward_without_film(&x, Modality::Mr).unwrap();
        assert_eq!(a.decoder.data, b.decoder.data);
        assert_eq!(a.dense.data, b.dense.data);
    }

    fn grads(bb: &mut Backbone<f64>) -> Vec<f64> {
        let mut g = Vec::new();
        bb.visit_params("", &mut |_: &str, p: &mut crate::nn::Param<f64>| g.extend_from_slice(&p.grad));
        g
    }

    #[test]
    fn encoder_path_matches_full_path() {
        let cfg = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = FeatureMap::from_vec(1, cfg.patch, (0..64).map(|i| ((i * 13) % 7) as f64 / 3.0 - 1.0).collect())
            .unwrap();
        let mut film = FilmParamSet::identity(&cfg.film_widths());
        film.gammas.iter_mut().flatten().enumerate().for_each(|(i, g)| *g += 0.1 * (i % 3) as f64);
        for frozen in [false, true] {
            let mut bb = Backbone::<f64>::new(&cfg, &mut rng).unwrap();
            bb.set_trainable(!frozen);
            let (out, full) = bb.forward_cached(&x, Modality::Ct, &film).unwrap();
            let (dense, enc) = bb.encode_cached(&x, Modality::Ct, &film).unwrap();
            assert_eq!(dense.data, out.dense.data);
            let mut dd = dense.clone();
            dd.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 5) as f64 - 2.0);
            bb.zero_grad();
            let a = bb.backward(&full, &film, None, Some(&dd));
            let ga = grads(&mut bb);
            bb.zero_grad();
            let b = bb.backward(&enc, &film, None, Some(&dd));
            assert_eq!(a, b);
            assert_eq!(ga, grads(&mut bb));
            assert_eq!(ga.iter().any(|&g| g != 0.0), !frozen);
        }
    }
}
