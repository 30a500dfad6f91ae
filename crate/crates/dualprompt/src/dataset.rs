//! Phantom datasets on disk: volumes, masks, a manifest and survival labels.

use std::fs;
use std::path::{Path, PathBuf};

use dualprompt_core::adaptation::SurvivalCase;
use dualprompt_core::metrics::SurvivalRecord;
use dualprompt_core::phantom::{generate_case, plant_outcome, split_subjects, PhantomSpec, Split};
use dualprompt_core::sampling::TrainCase;
use dualprompt_core::text::Sex;
use dualprompt_core::volume::{preprocess, Modality};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{load_mask, load_volume, save_mask, save_volume};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SURVIVAL_FILE: &str = "survival.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub region: String,
    pub modality: Modality,
    pub organs: Vec<String>,
    pub split: Split,
    /// Sidecar paths relative to the manifest.
    pub volume: String,
    pub masks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: PhantomSpec,
    pub entries: Vec<ManifestEntry>,
    /// Survival label file relative to the manifest, when the regions have
    /// lesion organs.
    #[serde(default)]
    pub survival: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub subject_id: String,
    pub time: f64,
    pub event: u8,
    pub age: u32,
    pub sex: Sex,
    pub weight: f64,
    pub smoking: bool,
    pub alcohol: bool,
    /// Ground-truth lesion voxel fraction, for evaluation only.
    pub lesion_fraction: f64,
}

impl SurvivalLabel {
    pub fn record(&self) -> SurvivalRecord {
        SurvivalRecord {
            subject_id: self.subject_id.clone(),
            time: self.time,
            event: self.event != 0,
        }
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, text).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

/// Render every subject of `spec` into `out_dir` and write the manifest.
pub fn generate_dataset(spec: &PhantomSpec, out_dir: impl AsRef<Path>) -> Result<Dataset> {
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let splits = split_subjects(spec.n_subjects, spec.seed);
    let with_survival = spec.regions.iter().all(|r| r.lesion().is_some());
    let mut entries = Vec::new();
    let mut labels = Vec::new();
    for (i, &split) in splits.iter().enumerate() {
        let region = spec.subject_region(i).name.clone();
        let case = generate_case(spec, &region, i)?;
        let mut masks = Vec::with_capacity(case.masks.len());
        for m in &case.masks {
            let name = format!("{}_{}.json", case.subject_id, m.organ);
            save_mask(m, out.join(&name))?;
            masks.push(name);
        }
        for v in &case.volumes {
            let name = format!("{}_{}.json", case.subject_id, v.modality);
            save_volume(v, out.join(&name))?;
            entries.push(ManifestEntry {
                subject_id: case.subject_id.clone(),
                region: region.clone(),
                modality: v.modality,
                organs: case.masks.iter().map(|m| m.organ.clone()).collect(),
                split,
                volume: name,
                masks: masks.clone(),
            });
        }
        if with_survival {
            let o = plant_outcome(spec, &case, i)?;
            labels.push(SurvivalLabel {
                subject_id: case.subject_id.clone(),
                time: o.record.time,
                event: o.record.event as u8,
                age: o.age,
                sex: o.sex,
                weight: o.weight,
                smoking: o.smoking,
                alcohol: o.alcohol,
                lesion_fraction: case.lesion_fraction,
            });
        }
    }
    let survival = if with_survival {
        write_json(&out.join(SURVIVAL_FILE), &labels)?;
        Some(SURVIVAL_FILE.to_string())
    } else {
        None
    };
    let manifest = Manifest {
        spec: spec.clone(),
        entries,
        survival,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(Dataset {
        root: out.to_path_buf(),
        manifest,
    })
}

impl Dataset {
    /// Open a manifest file, or a directory containing `manifest.json`.
    pub fn open(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let manifest: Manifest = read_json(&file)?;
        Ok(Dataset {
            root: file.parent().unwrap_or(Path::new(".")).to_path_buf(),
            manifest,
        })
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.manifest.entries.iter().filter(move |e| e.split == split)
    }

    /// Preprocessed volume and masks of one entry.
    pub fn load_case(&self, e: &ManifestEntry) -> Result<TrainCase> {
        let raw = load_volume(self.root.join(&e.volume))?;
        let volume = preprocess(&raw)?;
        let masks = e
            .masks
            .iter()
            .map(|m| load_mask(self.root.join(m)))
            .collect::<Result<Vec<_>>>()?;
        if masks.iter().any(|m| m.dims != volume.dims) {
            return Err(Error::format(
                self.root.join(&e.volume),
                "masks do not match the preprocessed volume grid",
            ));
        }
        Ok(TrainCase { volume, masks })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<TrainCase>> {
        self.entries(split).map(|e| self.load_case(e)).collect()
    }

    pub fn survival_labels(&self) -> Result<Vec<SurvivalLabel>> {
        let name = self
            .manifest
            .survival
            .as_ref()
            .ok_or_else(|| Error::Usage("dataset has no survival labels".into()))?;
        read_json(&self.root.join(name))
    }

    /// Survival cases of one split, grouped by subject in manifest order;
    /// each subject lists one case per requested modality present.
    pub fn survival_split(&self, split: Split, modalities: &[Modality]) -> Result<Vec<SubjectCases>> {
        let labels = self.survival_labels()?;
        let mut out: Vec<SubjectCases> = Vec::new();
        for e in self.entries(split).filter(|e| modalities.contains(&e.modality)) {
            let label = labels
                .iter()
                .find(|l| l.subject_id == e.subject_id)
                .ok_or_else(|| Error::Usage(format!("no survival label for {}", e.subject_id)))?;
            let volume = preprocess(&load_volume(self.root.join(&e.volume))?)?;
            let ehr = dualprompt_core::text::EhrRecord {
                sex: Some(label.sex),
                age: Some(label.age),
                modality: Some(e.modality),
                region: Some(e.region.clone()),
                weight: Some(label.weight),
                smoking: Some(label.smoking),
                alcohol: Some(label.alcohol),
            };
            let case = SurvivalCase {
                volume,
                ehr,
                record: label.record(),
            };
            match out.iter_mut().find(|s| s.label.subject_id == e.subject_id) {
                Some(s) => s.cases.push(case),
                None => out.push(SubjectCases {
                    label: label.clone(),
                    cases: vec![case],
                }),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct SubjectCases {
    pub label: SurvivalLabel,
    pub cases: Vec<SurvivalCase>,
}
