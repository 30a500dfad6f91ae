//! Prognosis fine-tuning: EHR prompt as context, adapters on the FiLM
//! generator, a risk head on pooled bottleneck features.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::spread_pooled_grad;
use crate::lora::{apply_lora, LoraConfig, LoraReport};
use crate::metrics::{deephit_loss_grad, softmax_rows, softmax_rows_backward, DeepHitConfig, SurvivalRecord, TimeBins};
use crate::model::DualPromptModel;
use crate::nn::Parameterized;
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::prognosis::{PrognosisHead, RiskPrediction};
use crate::real::Real;
use crate::sampling::crop_f32;
use crate::tensor::{Dims, FeatureMap};
use crate::text::{serialize_ehr, EhrRecord};
use crate::volume::Volume;

/// One preprocessed volume of a subject with its covariates and outcome.
#[derive(Debug, Clone)]
pub struct SurvivalCase {
    pub volume: Volume,
    pub ehr: EhrRecord,
    pub record: SurvivalRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrognosisConfig {
    pub bins: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub rank_weight: f64,
    pub sigma: f64,
    pub lora: LoraConfig,
    /// Dense layers that receive adapters; empty means every FiLM layer.
    pub layers: Vec<String>,
    pub seed: u64,
}

impl Default for PrognosisConfig {
    fn default() -> Self {
        PrognosisConfig {
            bins: 8,
            hidden: 64,
            epochs: 20,
            batch_size: 16,
            lr_init: 3e-3,
            weight_decay: 1e-5,
            rank_weight: 0.1,
            sigma: 0.1,
            lora: LoraConfig::default(),
            layers: Vec::new(),
            seed: 0,
        }
    }
}

impl PrognosisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Configuration("bins ≥ 2 and positive hidden, epochs, batch size required".into()));
        }
        if !(self.lr_init > 0.0) || !(self.sigma > 0.0) || self.rank_weight < 0.0 {
            return Err(Error::Configuration("learning rate and sigma must be positive".into()));
        }
        Ok(())
    }

    fn deephit(&self) -> DeepHitConfig {
        DeepHitConfig {
            rank_weight: self.rank_weight,
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrognosisEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrognosisOutcome {
    pub bins: TimeBins,
    pub report: LoraReport,
    pub history: Vec<PrognosisEpoch>,
}

/// Attach a fresh risk head, then adapters; everything else is frozen.
pub fn prepare_prognosis<F: Real>(model: &mut DualPromptModel<F>, cfg: &PrognosisConfig) -> Result<LoraReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    model.prognosis = Some(PrognosisHead::new(
        model.cfg.backbone.dense_channels(),
        cfg.hidden,
        cfg.bins,
        &mut rng,
    ));
    let layers: Vec<String> = if cfg.layers.is_empty() {
        model.film.layer_names()
    } else {
        cfg.layers.clone()
    };
    let refs: Vec<&str> = layers.iter().map(|s| s.as_str()).collect();
    apply_lora(model, &refs, &cfg.lora)
}

/// Risk of one subject from one volume: the serialised EHR is the context
/// prompt, pooled bottleneck features feed the risk head.
pub fn predict_risk<F: Real>(model: &DualPromptModel<F>, v: &Volume, ehr: &EhrRecord) -> Result<RiskPrediction> {
    let t1 = serialize_ehr(ehr)?;
    let head = model
        .prognosis
        .as_ref()
        .ok_or_else(|| Error::Configuration("no prognosis head attached".into()))?;
    let pooled: Vec<F> = model.pooled_dense(v, &t1)?.into_iter().map(F::of).collect();
    Ok(head.predict(&pooled))
}

fn training_patch<R: Rng + ?Sized>(v: &Volume, patch: Dims, rng: &mut R) -> Result<Vec<f32>> {
    let d = v.dims;
    if d.0.iter().zip(&patch.0).any(|(a, b)| a < b) {
        return Err(Error::invalid(alloc::format!("volume {} smaller than the patch", v.id)));
    }
    if d == patch {
        return Ok(v.data.clone());
    }
    let mut o = [0usize; 3];
    for a in 0..3 {
        o[a] = rng.random_range(0..=d.0[a] - patch.0[a]);
    }
    Ok(crop_f32(&v.data, d, o, patch))
}

/// Fine-tune adapters and risk head with the DeepHit objective on
/// mini-batches. The model must have been through [`prepare_prognosis`].
/// The head's input standardisation is fitted to the training cases first.
pub fn fine_tune_prognosis(
    model: &mut DualPromptModel<f32>,
    cases: &[SurvivalCase],
    cfg: &PrognosisConfig,
    mut on_epoch: impl FnMut(&PrognosisEpoch) -> Result<()>,
) -> Result<PrognosisOutcome> {
    cfg.validate()?;
    if model.prognosis.is_none() {
        return Err(Error::Configuration("no prognosis head attached".into()));
    }
    if cases.len() < 2 {
        return Err(Error::Configuration("prognosis fine-tuning needs at least two cases".into()));
    }
    let times: Vec<f64> = cases.iter().map(|c| c.record.time).collect();
    let bins = TimeBins::equal_frequency(&times, cfg.bins)?;
    let texts: Vec<String> = cases.iter().map(|c| serialize_ehr(&c.ehr)).collect::<Result<_>>()?;
    let prompts: Vec<Vec<f32>> = texts.iter().map(|t| model.embed(t)).collect::<Result<_>>()?;
    let pooled: Vec<Vec<f64>> = cases
        .iter()
        .zip(&texts)
        .map(|(c, t)| model.pooled_dense(&c.volume, t))
        .collect::<Result<_>>()?;
    model
        .prognosis
        .as_mut()
        .expect("checked above")
        .standardize_inputs(&pooled)?;
    let patch = model.cfg.backbone.patch;
    let nb = cfg.bins;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let steps_per_epoch = cases.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..cases.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr_init;
        for batch in order.chunks(cfg.batch_size) {
            lr = lr_at(step, total, cfg.lr_init);
            model.zero_grad();
            let mut states = Vec::with_capacity(batch.len());
            let mut logits = Vec::with_capacity(batch.len() * nb);
            for &i in batch {
                let c = &cases[i];
                let x = FeatureMap::from_vec(1, patch, training_patch(&c.volume, patch, &mut rng)?)?;
                let (film, film_cache) = model.film.forward_cached(&prompts[i]);
                let (dense, cache) = model.backbone.encode_cached(&x, c.volume.modality, &film)?;
                let pooled = dense.global_avg_pool();
                let head = model.prognosis.as_ref().expect("checked above");
                let (z, hcache) = head.logits_cached(&pooled);
                logits.extend_from_slice(&z);
                states.push((film, film_cache, dense, cache, hcache));
            }
            let records: Vec<SurvivalRecord> = batch.iter().map(|&i| cases[i].record.clone()).collect();
            let probs = softmax_rows(&logits, nb);
            let (terms, dprobs) = deephit_loss_grad(&probs, &records, &bins, cfg.deephit())?;
            if !terms.total.is_finite() {
                return Err(Error::UndefinedResult(alloc::format!(
                    "non-finite prognosis loss at step {step} (lr {lr:.3e})"
                )));
            }
            let dz = softmax_rows_backward(&probs, &dprobs, nb);
            for ((film, film_cache, dense, cache, hcache), dzr) in states.iter().zip(dz.chunks(nb)) {
                let head = model.prognosis.as_mut().expect("checked above");
                let dpooled = head.backward(hcache, dzr);
                let d_dense = spread_pooled_grad(&dpooled, dense);
                let dfilm = model.backbone.backward(cache, film, None, Some(&d_dense));
                model.film.backward(film_cache, &dfilm);
            }
            opt.update(model, lr);
            loss_sum += terms.total;
            step += 1;
        }
        let rec = PrognosisEpoch {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            lr,
        };
        on_epoch(&rec)?;
        history.push(rec);
    }
    Ok(PrognosisOutcome {
        bins,
        report: crate::lora::lora_report(model),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::Sex;
    use crate::volume::Modality;

    fn ehr() -> EhrRecord {
        EhrRecord {
            sex: Some(Sex::Female),
            age: Some(61),
            modality: Some(Modality::Pet),
            region: Some("thorax".into()),
            weight: Some(70.0),
            smoking: Some(true),
            alcohol: Some(false),
        }
    }

    #[test]
    fn zero_head_risk_is_uniform() {
        let mut m = DualPromptModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        m.prognosis = Some(PrognosisHead::zeroed(m.cfg.backbone.dense_channels(), 64, 8));
        let d = Dims::cube(32);
        let v = Volume {
            data: (0..d.len()).map(|i| ((i % 17) as f32 - 8.0) / 5.0).collect(),
            dims: d,
            spacing: [1.5; 3],
            modality: Modality::Pet,
            region: "thorax".into(),
            id: "s".into(),
        };
        let r = predict_risk(&m, &v, &ehr()).unwrap();
        assert!((r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        assert!((r.risk - 3.5).abs() < 1e-9);
        let mut missing = ehr();
        missing.age = None;
        assert!(matches!(predict_risk(&m, &v, &missing), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn prepare_freezes_base() {
        let mut m = DualPromptModel::<f32>::new(ModelConfig::default(), 0).unwrap();
        let r = prepare_prognosis(&mut m, &PrognosisConfig::default()).unwrap();
        assert!(r.fraction < 0.05);
        assert!(!m.backbone.stems[0].conv1.weight.trainable);
        assert!(m.prognosis.as_ref().unwrap().fc1.weight.trainable);
    }
}
