//! The full dual-prompt segmenter: T1 drives FiLM throughout the backbone,
//! T2 (with pooled bottleneck features) generates the prediction head.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BackboneOutput, FilmMlp, FilmParamSet};
use crate::error::{Error, Result};
use crate::head::{head_backward, head_logits, spread_pooled_grad, HeadConfig, PredMlp};
use crate::metrics::seg_loss_logits_grad;
use crate::nn::param::join;
use crate::nn::{ParamVisitor, Parameterized};
use crate::prognosis::PrognosisHead;
use crate::real::{sigmoid, Real};
use crate::tensor::{Dims, FeatureMap};
use crate::text::TextEncoder;
use crate::volume::{Modality, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head_hidden: usize,
    pub pred_dim: usize,
    pub text_vocab: usize,
    pub text_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            head_hidden: 8,
            pred_dim: 128,
            text_vocab: crate::text::DEFAULT_VOCAB,
            text_seed: crate::text::DEFAULT_TEXT_SEED,
        }
    }
}

impl ModelConfig {
    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            decoder_channels: self.backbone.decoder_channels(),
            hidden: self.head_hidden,
            dense_channels: self.backbone.dense_channels(),
            text_dim: self.backbone.text_dim,
            embed_dim: self.pred_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head_hidden == 0 || self.pred_dim == 0 || self.text_vocab == 0 {
            return Err(Error::Configuration("head and text sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualPromptModel<F> {
    pub cfg: ModelConfig,
    pub encoder: TextEncoder,
    pub film: FilmMlp<F>,
    pub backbone: Backbone<F>,
    pub pred: PredMlp<F>,
    pub prognosis: Option<PrognosisHead<F>>,
}

/// Segmentation target for one prompted organ of a sample.
#[derive(Debug, Clone)]
pub struct OrganTarget<F> {
    pub e_t2: Vec<F>,
    pub mask: Vec<u8>,
}

/// Start offsets of sliding windows of length `patch` with `stride` that
/// cover `[0, dim)`; the last window is flush with the end.
pub fn window_starts(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + patch < dim).collect();
    v.push(dim - patch);
    v
}

impl<F: Real> DualPromptModel<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let film = FilmMlp::new(&cfg.backbone, &mut rng);
        let backbone = Backbone::new(&cfg.backbone, &mut rng)?;
        let pred = PredMlp::new(cfg.head(), &mut rng);
        let encoder = TextEncoder::new(cfg.text_vocab, cfg.backbone.text_dim, cfg.text_seed);
        Ok(DualPromptModel {
            cfg,
            encoder,
            film,
            backbone,
            pred,
            prognosis: None,
        })
    }

    pub fn embed(&self, text: &str) -> Result<Vec<F>> {
        Ok(self
            .encoder
            .encode(text)?
            .vector
            .iter()
            .map(|&v| F::of(v as f64))
            .collect())
    }

    pub fn film_params(&self, t1: &str) -> Result<FilmParamSet<F>> {
        Ok(self.film.forward(&self.embed(t1)?))
    }

    /// Backbone features of one patch under the context prompt.
    pub fn features(&self, patch: &FeatureMap<F>, modality: Modality, t1: &str) -> Result<BackboneOutput<F>> {
        self.backbone.forward(patch, modality, &self.film_params(t1)?)
    }

    /// Probability maps of a patch, one per target prompt.
    pub fn predict_patch(
        &self,
        out: &BackboneOutput<F>,
        e_t2s: &[Vec<F>],
    ) -> Result<Vec<Vec<F>>> {
        e_t2s
            .iter()
            .map(|e| {
                let (_, theta) = self.pred.forward(e, &out.dense)?;
                let (z, _) = head_logits(&out.decoder, &theta)?;
                Ok(z.into_iter().map(sigmoid).collect())
            })
            .collect()
    }

    /// Forward and backward for one sample supervised on several organs.
    /// Gradients are scaled by `weight / targets.len()`; returns the
    /// unscaled mean loss.
    pub fn accumulate_sample(
        &mut self,
        patch: &FeatureMap<F>,
        modality: Modality,
        e_t1: &[F],
        targets: &[OrganTarget<F>],
        weight: f64,
    ) -> Result<f64> {
        if targets.is_empty() {
            return Err(Error::invalid("a training sample needs at least one target"));
        }
        let (film, film_cache) = self.film.forward_cached(e_t1);
        let (out, cache) = self.backbone.forward_cached(patch, modality, &film)?;
        let scale = weight / targets.len() as f64;
        let mut d_decoder = FeatureMap::zeros(out.decoder.channels, out.decoder.dims);
        let mut d_pooled = vec![F::zero(); out.dense.channels];
        let mut total = 0.0;
        for t in targets {
            let (_, theta, pcache) = self.pred.forward_cached(&t.e_t2, &out.dense)?;
            let (z, hcache) = head_logits(&out.decoder, &theta)?;
            let (loss, mut dz) = seg_loss_logits_grad(&z, &t.mask)?;
            if !loss.is_finite() {
                return Err(Error::UndefinedResult(alloc::format!("non-finite loss {}", loss.as_f64())));
            }
            total += loss.as_f64();
            dz.iter_mut().for_each(|g| *g *= F::of(scale));
            let (df, dtheta) = head_backward(&out.decoder, &theta, &hcache, &dz);
            d_decoder.add_assign(&df);
            let dp = self.pred.backward(&pcache, &dtheta);
            for (a, b) in d_pooled.iter_mut().zip(dp) {
                *a += b;
            }
        }
        let d_dense = spread_pooled_grad(&d_pooled, &out.dense);
        let dfilm = self.backbone.backward(&cache, &film, Some(&d_decoder), Some(&d_dense));
        self.film.backward(&film_cache, &dfilm);
        Ok(total / targets.len() as f64)
    }

    /// Sliding-window probability maps of a preprocessed volume, one per
    /// target prompt. Windows use stride `patch / 2`; overlaps are averaged
    /// uniformly. Volumes smaller than the patch are zero-padded and the
    /// output cropped back.
    pub fn segment(&self, v: &Volume, t1: &str, t2s: &[String]) -> Result<Vec<Vec<f32>>> {
        v.validate()?;
        let patch = self.cfg.backbone.patch;
        let film = self.film_params(t1)?;
        let e_t2s = t2s.iter().map(|t| self.embed(t)).collect::<Result<Vec<_>>>()?;
        let d = v.dims;
        let pd = Dims([
            d.0[0].max(patch.0[0]),
            d.0[1].max(patch.0[1]),
            d.0[2].max(patch.0[2]),
        ]);
        let mut padded = FeatureMap::<F>::zeros(1, pd);
        for z in 0..d.nz() {
            for y in 0..d.ny() {
                for x in 0..d.nx() {
                    padded.data[pd.index(x, y, z)] = F::of(v.data[d.index(x, y, z)] as f64);
                }
            }
        }
        let starts: Vec<Vec<usize>> = (0..3)
            .map(|a| window_starts(pd.0[a], patch.0[a], (patch.0[a] / 2).max(1)))
            .collect();
        let mut acc = vec![vec![0.0f64; pd.len()]; t2s.len()];
        let mut hits = vec![0u32; pd.len()];
        for &sz in &starts[2] {
            for &sy in &starts[1] {
                for &sx in &starts[0] {
                    let win = padded.crop([sx, sy, sz], patch);
                    let out = self.backbone.forward(&win, v.modality, &film)?;
                    let probs = self.predict_patch(&out, &e_t2s)?;
                    for z in 0..patch.nz() {
                        for y in 0..patch.ny() {
                            for x in 0..patch.nx() {
                                let g = pd.index(sx + x, sy + y, sz + z);
                                let l = patch.index(x, y, z);
                                hits[g] += 1;
                                for (a, p) in acc.iter_mut().zip(&probs) {
                                    a[g] += p[l].as_f64();
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(acc
            .into_iter()
            .map(|a| {
                let mut out = Vec::with_capacity(d.len());
                for z in 0..d.nz() {
                    for y in 0..d.ny() {
                        for x in 0..d.nx() {
                            let g = pd.index(x, y, z);
                            out.push((a[g] / hits[g] as f64) as f32);
                        }
                    }
                }
                out
            })
            .collect())
    }

    /// Bottleneck features of a whole preprocessed volume, pooled over
    /// every sliding window (mean of per-window channel means).
    pub fn pooled_dense(&self, v: &Volume, t1: &str) -> Result<Vec<f64>> {
        let patch = self.cfg.backbone.patch;
        let film = self.film_params(t1)?;
        let d = v.dims;
        if d.0.iter().zip(&patch.0).any(|(a, b)| a < b) {
            return Err(Error::invalid("volume smaller than the patch"));
        }
        let x = FeatureMap::from_vec(1, d, v.data.iter().map(|&q| F::of(q as f64)).collect())?;
        let starts: Vec<Vec<usize>> = (0..3)
            .map(|a| window_starts(d.0[a], patch.0[a], (patch.0[a] / 2).max(1)))
            .collect();
        let mut acc = vec![0.0f64; self.cfg.backbone.dense_channels()];
        let mut n = 0usize;
        for &sz in &starts[2] {
            for &sy in &starts[1] {
                for &sx in &starts[0] {
                    let dense = self.backbone.encode(&x.crop([sx, sy, sz], patch), v.modality, &film)?;
                    for (a, p) in acc.iter_mut().zip(dense.global_avg_pool()) {
                        *a += p.as_f64();
                    }
                    n += 1;
                }
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Ok(acc)
    }

    /// Names of the dense layers that accept low-rank adapters.
    pub fn linear_layer_names(&self) -> Vec<String> {
        let mut v = self.film.layer_names();
        v.extend(self.pred.layer_names());
        v
    }

    pub fn linear_layer_mut(&mut self, name: &str) -> Option<&mut crate::nn::Linear<F>> {
        if name.starts_with("film.") {
            self.film.layer_mut(name)
        } else {
            self.pred.layer_mut(name)
        }
    }
}

impl<F: Real> Parameterized<F> for DualPromptModel<F> {
    fn visit_params(&mut self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.film.visit_params(&join(prefix, "film"), v);
        self.backbone.visit_params(&join(prefix, "backbone"), v);
        self.pred.visit_params(&join(prefix, "pred"), v);
        if let Some(p) = &mut self.prognosis {
            p.visit_params(&join(prefix, "prognosis"), v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover() {
        assert_eq!(window_starts(48, 32, 16), vec![0, 16]);
        assert_eq!(window_starts(32, 32, 16), vec![0]);
        assert_eq!(window_starts(20, 32, 16), vec![0]);
        assert_eq!(window_starts(50, 32, 16), vec![0, 16, 18]);
    }

    #[test]
    fn default_parameter_count() {
        let mut m = DualPromptModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        let n = m.param_count();
        assert!(n > 100_000 && n < 400_000, "{n}");
    }
}
