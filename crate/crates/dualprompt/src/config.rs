//! Experiment configuration file (JSON). Every section is optional and
//! falls back to the desk-scale defaults.

use std::fs;
use std::path::Path;

use dualprompt_core::adaptation::PrognosisConfig;
use dualprompt_core::model::ModelConfig;
use dualprompt_core::phantom::PhantomSpec;
use dualprompt_core::tensor::Dims;
use dualprompt_core::train::TrainConfig;
use dualprompt_core::volume::Modality;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Model initialisation seed.
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub prognosis: PrognosisConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            phantom: PhantomSpec::desk_default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            prognosis: PrognosisConfig::default(),
        }
    }
}

/// Named phantom presets for `gen`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Segmentation set: 24 subjects, all modalities, 48³.
    Desk,
    /// Survival cohort: CT and PET only, one patch per volume.
    Prognosis,
}

/// Survival cohort: subjects at patch size so each volume is one window.
pub fn prognosis_cohort() -> PhantomSpec {
    PhantomSpec {
        modalities: vec![Modality::Ct, Modality::Pet],
        volume_dims: Dims::cube(32),
        n_subjects: 192,
        ..PhantomSpec::desk_default()
    }
}

impl Preset {
    pub fn spec(self) -> PhantomSpec {
        match self {
            Preset::Desk => PhantomSpec::desk_default(),
            Preset::Prognosis => prognosis_cohort(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(Error::json(path))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Override the model, training and fine-tuning seeds (not the
    /// phantom seed).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.prognosis.seed = seed;
        self.prognosis.lora.seed = seed;
        self
    }
}
