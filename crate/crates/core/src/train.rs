//! Optimisation loop and held-out evaluation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::model::{DualPromptModel, OrganTarget};
use crate::nn::Parameterized;
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::sampling::{Sampler, TrainCase};
use crate::tensor::FeatureMap;
use crate::text::{make_prompt, PromptKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Supervise every organ of the sampled case on each crop, not only the
    /// drawn one. The crop is still biased towards the drawn organ.
    pub all_organs: bool,
    /// Samples per epoch; `None` uses the number of training cases.
    pub samples_per_epoch: Option<usize>,
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 2,
            lr_init: 2e-3,
            weight_decay: 1e-5,
            seed: 0,
            augment: AugmentConfig::default(),
            all_organs: true,
            samples_per_epoch: None,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Configuration("epochs, batch size and validation interval must be positive".into()));
        }
        if !(self.lr_init > 0.0) || !self.lr_init.is_finite() {
            return Err(Error::Configuration("initial learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Configuration("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// `None` on epochs without validation.
    pub val_dsc: Option<f64>,
    pub lr: f64,
}

pub struct TrainOutcome<F> {
    pub history: Vec<EpochRecord>,
    pub best: DualPromptModel<F>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
}

/// Binary masks (threshold 0.5) for every organ of a case under the given
/// prompts, in mask order.
pub fn predict_masks(
    model: &DualPromptModel<f32>,
    case: &TrainCase,
    t1: &str,
    t2s: &[String],
) -> Result<Vec<Vec<u8>>> {
    Ok(model
        .segment(&case.volume, t1, t2s)?
        .into_iter()
        .map(|p| p.iter().map(|&v| (v >= 0.5) as u8).collect())
        .collect())
}

/// Per-organ DSC of each case under the matched prompts; rows follow
/// `cases`, columns the case's masks.
pub fn case_dice(model: &DualPromptModel<f32>, cases: &[TrainCase]) -> Result<Vec<Vec<f64>>> {
    cases
        .iter()
        .map(|c| {
            let m = c.modality();
            let t1 = make_prompt(m, &c.volume.region, PromptKind::Context);
            let t2s: Vec<String> = c
                .masks
                .iter()
                .map(|k| make_prompt(m, &k.organ, PromptKind::Target))
                .collect();
            let pred = predict_masks(model, c, &t1, &t2s)?;
            pred.iter().zip(&c.masks).map(|(p, g)| dice(p, &g.data)).collect()
        })
        .collect()
}

/// Macro average over organ names of the per-case mean DSC.
pub fn macro_dice(cases: &[TrainCase], scores: &[Vec<f64>]) -> f64 {
    let mut names: Vec<&str> = Vec::new();
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (c, row) in cases.iter().zip(scores) {
        for (m, &s) in c.masks.iter().zip(row) {
            let k = match names.iter().position(|&n| n == m.organ) {
                Some(k) => k,
                None => {
                    names.push(&m.organ);
                    sums.push((0.0, 0));
                    names.len() - 1
                }
            };
            sums[k].0 += s;
            sums[k].1 += 1;
        }
    }
    if sums.is_empty() {
        return 0.0;
    }
    sums.iter().map(|(s, n)| s / *n as f64).sum::<f64>() / sums.len() as f64
}

pub fn mean_dice(model: &DualPromptModel<f32>, cases: &[TrainCase]) -> Result<f64> {
    Ok(macro_dice(cases, &case_dice(model, cases)?))
}

/// Train `model` in place. `on_epoch` sees each record (and the current
/// weights) as it is produced; returning an error stops training.
pub fn train(
    model: &mut DualPromptModel<f32>,
    train_cases: &[TrainCase],
    val_cases: &[TrainCase],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &DualPromptModel<f32>) -> Result<()>,
) -> Result<TrainOutcome<f32>> {
    cfg.validate()?;
    let sampler = Sampler::new(train_cases, model.cfg.backbone.patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = cfg.samples_per_epoch.unwrap_or(train_cases.len()).max(1);
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr_init;
        for _ in 0..steps_per_epoch {
            lr = lr_at(step, total, cfg.lr_init);
            model.zero_grad();
            let mut batch_loss = 0.0;
            for _ in 0..cfg.batch_size {
                let mut s = sampler.sample(&mut rng);
                augment(&mut s, &cfg.augment, &mut rng);
                let e_t1 = model.embed(&s.t1)?;
                let picked: Vec<usize> = if cfg.all_organs {
                    (0..s.targets.len()).collect()
                } else {
                    alloc::vec![s.focus]
                };
                let targets = picked
                    .iter()
                    .map(|&k| {
                        Ok(OrganTarget {
                            e_t2: model.embed(&s.targets[k].0)?,
                            mask: s.targets[k].1.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let x = FeatureMap::from_vec(1, s.dims, s.patch)?;
                let l = model.accumulate_sample(&x, s.modality, &e_t1, &targets, 1.0 / cfg.batch_size as f64)
                    .map_err(|e| Error::UndefinedResult(alloc::format!("step {step}, lr {lr:.3e}: {e}")))?;
                batch_loss += l / cfg.batch_size as f64;
            }
            if !batch_loss.is_finite() {
                return Err(Error::UndefinedResult(alloc::format!(
                    "non-finite loss {batch_loss} at step {step} (lr {lr:.3e})"
                )));
            }
            opt.update(model, lr);
            loss_sum += batch_loss;
            step += 1;
        }
        let val_dsc = if !val_cases.is_empty() && (epoch % cfg.validate_every == 0 || epoch == cfg.epochs) {
            Some(mean_dice(model, val_cases)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / steps_per_epoch as f64,
            val_dsc,
            lr,
        };
        // Without a validation split the latest weights are kept.
        let score = if val_cases.is_empty() { Some(epoch as f64) } else { val_dsc };
        if let Some(v) = score {
            if v > best_val {
                best_val = v;
                best_epoch = epoch;
                best = model.clone();
            }
        }
        on_epoch(&rec, model)?;
        history.push(rec);
    }
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        best_val_dsc: if val_cases.is_empty() { f64::NAN } else { best_val },
    })
}
