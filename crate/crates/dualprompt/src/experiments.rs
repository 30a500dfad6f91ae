//! Experiment drivers behind the CLI: training, prompted inference, the
//! prompt ablation matrix, feature export and prognosis fine-tuning.
//!
//! Each driver returns its report as a value; writing to disk is optional
//! so the acceptance suite can run the same code paths in memory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use dualprompt_core::ablation::{evaluate, AblationRow, Condition};
use dualprompt_core::adaptation::{fine_tune_prognosis, predict_risk, prepare_prognosis, PrognosisConfig, PrognosisEpoch};
use dualprompt_core::features::{pca2, separation_in_blocks, Separation};
use dualprompt_core::lora::LoraReport;
use dualprompt_core::metrics::{concordance_index, dice, spearman, SurvivalRecord, TimeBins};
use dualprompt_core::model::DualPromptModel;
use dualprompt_core::phantom::Split;
use dualprompt_core::prognosis::late_fusion_risks;
use dualprompt_core::sampling::TrainCase;
use dualprompt_core::text::{make_prompt, PromptKind};
use dualprompt_core::train::{case_dice, macro_dice, predict_masks, train, EpochRecord};
use dualprompt_core::volume::{preprocess, Mask, Modality};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_adapter, save_base};
use crate::config::ExperimentConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::volume_io::{load_mask, load_volume, save_mask, save_probability_map};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const ADAPTER_CHECKPOINT: &str = "adapter.ckpt";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, text + "\n").map_err(Error::io(path))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub history: Vec<EpochRecord>,
    pub seconds: f64,
}

/// Train on the dataset's train split, selecting on its validation split.
/// With `out`, streams `history.jsonl` and writes `best.ckpt` and
/// `train_report.json`.
pub fn run_train(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<(DualPromptModel<f32>, TrainReport)> {
    let start = Instant::now();
    let train_cases = data.load_split(Split::Train)?;
    let val_cases = data.load_split(Split::Val)?;
    let mut model = DualPromptModel::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let mut history_file = match out {
        Some(dir) => {
            ensure_dir(dir)?;
            let p = dir.join(HISTORY_FILE);
            Some((BufWriter::new(File::create(&p).map_err(Error::io(&p))?), p))
        }
        None => None,
    };
    let outcome = train(&mut model, &train_cases, &val_cases, &cfg.train, |rec, _| {
        if let Some((w, p)) = history_file.as_mut() {
            let line = serde_json::to_string(rec).expect("epoch records serialise");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| dualprompt_core::Error::Configuration(format!("{}: {e}", p.display())))?;
        }
        Ok(())
    })?;
    let report = TrainReport {
        best_epoch: outcome.best_epoch,
        best_val_dsc: outcome.best_val_dsc,
        history: outcome.history,
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        save_base(&outcome.best, dir.join(BEST_CHECKPOINT))?;
        write_json(&dir.join("train_report.json"), &report)?;
    }
    Ok((outcome.best, report))
}

// -------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub id: String,
    pub modality: Modality,
    pub region: String,
    pub organs: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub mean_dsc: f64,
    pub cases: Vec<CaseScore>,
}

/// Per-organ DSC under matched prompts and its macro mean.
pub fn evaluate_cases(model: &DualPromptModel<f32>, cases: &[TrainCase]) -> Result<SegReport> {
    let scores = case_dice(model, cases)?;
    Ok(SegReport {
        mean_dsc: macro_dice(cases, &scores),
        cases: cases
            .iter()
            .zip(&scores)
            .map(|(c, s)| CaseScore {
                id: c.volume.id.clone(),
                modality: c.modality(),
                region: c.volume.region.clone(),
                organs: c.masks.iter().map(|m| m.organ.clone()).zip(s.iter().copied()).collect(),
            })
            .collect(),
    })
}

// --------------------------------------------------------------- inference

/// Prompts for `infer`: raw strings, or template fields that are rendered.
#[derive(Debug, Clone, PartialEq)]
pub struct InferRequest {
    pub volume: PathBuf,
    pub t1: String,
    pub t2s: Vec<String>,
    /// Optional ground-truth masks, one per target prompt.
    pub ground_truth: Vec<PathBuf>,
}

impl InferRequest {
    /// Build prompts from template fields.
    pub fn from_fields(volume: PathBuf, modality: Modality, region: &str, organs: &[String]) -> Self {
        InferRequest {
            volume,
            t1: make_prompt(modality, region, PromptKind::Context),
            t2s: organs.iter().map(|o| make_prompt(modality, o, PromptKind::Target)).collect(),
            ground_truth: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferTarget {
    pub t2: String,
    pub mask: String,
    pub probability: String,
    pub voxels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub volume: String,
    pub t1: String,
    pub targets: Vec<InferTarget>,
}

/// Segment one volume under the given prompts; writes `mask_{k}` and
/// `prob_{k}` volume files plus `report.json` into `out`.
pub fn run_infer(model: &DualPromptModel<f32>, req: &InferRequest, out: &Path) -> Result<InferReport> {
    if req.t2s.is_empty() {
        return Err(Error::Usage("at least one target prompt is required".into()));
    }
    if !req.ground_truth.is_empty() && req.ground_truth.len() != req.t2s.len() {
        return Err(Error::Usage("give one ground-truth mask per target prompt, or none".into()));
    }
    ensure_dir(out)?;
    let v = preprocess(&load_volume(&req.volume)?)?;
    let probs = model.segment(&v, &req.t1, &req.t2s)?;
    let mut targets = Vec::with_capacity(probs.len());
    for (k, (p, t2)) in probs.iter().zip(&req.t2s).enumerate() {
        let bin: Vec<u8> = p.iter().map(|&x| (x >= 0.5) as u8).collect();
        let mask = Mask {
            data: bin,
            dims: v.dims,
            organ: t2.clone(),
            id: v.id.clone(),
        };
        let mask_name = format!("mask_{k}.json");
        let prob_name = format!("prob_{k}.json");
        save_mask(&mask, out.join(&mask_name))?;
        save_probability_map(&v, p, out.join(&prob_name))?;
        let dsc = match req.ground_truth.get(k) {
            Some(gt) => Some(dice(&mask.data, &load_mask(gt)?.data)?),
            None => None,
        };
        targets.push(InferTarget {
            t2: t2.clone(),
            mask: mask_name,
            probability: prob_name,
            voxels: mask.count(),
            dsc,
        });
    }
    let report = InferReport {
        volume: req.volume.display().to_string(),
        t1: req.t1.clone(),
        targets,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------- ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, c: Condition) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.condition == c)
    }

    /// Aligned text table; DSC in percent, deltas against the baseline.
    pub fn table(&self) -> String {
        let base = self.row(Condition::Baseline).map(|r| r.mean_dsc);
        let mut s = format!("{:<24} {:>8} {:>8} {:>11}\n", "condition", "DSC", "delta", "unprompted");
        for r in &self.rows {
            let delta = base.map_or(String::from("-"), |b| format!("{:+.2}", 100.0 * (r.mean_dsc - b)));
            let un = r.unprompted_overlap.map_or(String::from("-"), |u| format!("{:.2}", 100.0 * u));
            s.push_str(&format!(
                "{:<24} {:>8.2} {:>8} {:>11}\n",
                r.condition.as_str(),
                100.0 * r.mean_dsc,
                delta,
                un
            ));
        }
        s
    }
}

/// All six conditions on the given cases.
pub fn run_ablation(model: &DualPromptModel<f32>, cases: &[TrainCase], regions: &[String]) -> Result<AblationReport> {
    let rows = Condition::ALL
        .iter()
        .map(|&c| evaluate(model, cases, c, regions))
        .collect::<dualprompt_core::Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}

pub fn write_ablation(report: &AblationReport, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_json(&out.join("ablation.json"), report)?;
    let p = out.join("ablation.txt");
    fs::write(&p, report.table()).map_err(Error::io(&p))
}

// ---------------------------------------------------------------- features

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    /// `A`: fixed target, varied context; `B`: fixed context, varied target.
    pub set: char,
    pub volume: String,
    pub modality: Modality,
    pub region: String,
    pub t1: String,
    pub t2: String,
    /// Index of the varied prompt within its set.
    pub group: usize,
    pub pc: [f64; 2],
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub rows_a: usize,
    pub rows_b: usize,
    /// Set A grouped by context prompt, compared within each acquisition.
    pub separation_a: Separation,
    /// Set B vectors of one volume are bitwise identical across targets.
    pub set_b_identical: bool,
    pub explained_variance: [f64; 2],
}

/// Pooled bottleneck features for both prompt sets on `cases`. Set A
/// varies the context over every (modality, region) pair of `regions`
/// with the target fixed to the case's first organ; set B keeps the
/// matched context and varies the target over the case's organs.
pub fn run_features(
    model: &DualPromptModel<f32>,
    cases: &[TrainCase],
    modalities: &[Modality],
    regions: &[String],
) -> Result<(Vec<FeatureRow>, FeatureReport)> {
    let contexts: Vec<(Modality, &String)> = modalities
        .iter()
        .flat_map(|&m| regions.iter().map(move |r| (m, r)))
        .collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut blocks = Vec::new();
    let acquisition = |m: Modality, r: &str| -> usize {
        m.index() * regions.len() + regions.iter().position(|x| x == r).unwrap_or(regions.len())
    };
    for c in cases {
        let m = c.modality();
        let first = c.masks.first().ok_or_else(|| Error::Usage("case without organs".into()))?;
        let t2 = make_prompt(m, &first.organ, PromptKind::Target);
        for (g, &(cm, cr)) in contexts.iter().enumerate() {
            let t1 = make_prompt(cm, cr, PromptKind::Context);
            rows.push(FeatureRow {
                set: 'A',
                volume: c.volume.id.clone(),
                modality: m,
                region: c.volume.region.clone(),
                t1: t1.clone(),
                t2: t2.clone(),
                group: g,
                pc: [0.0; 2],
                features: model.pooled_dense(&c.volume, &t1)?,
            });
            labels.push(g);
            blocks.push(acquisition(m, &c.volume.region));
        }
    }
    let rows_a = rows.len();
    let separation_a = separation_in_blocks(
        &rows.iter().map(|r| r.features.clone()).collect::<Vec<_>>(),
        &labels,
        &blocks,
    )?;
    let mut set_b_identical = true;
    for c in cases {
        let m = c.modality();
        let t1 = make_prompt(m, &c.volume.region, PromptKind::Context);
        let mut first: Option<Vec<f64>> = None;
        for (g, mask) in c.masks.iter().enumerate() {
            let t2 = make_prompt(m, &mask.organ, PromptKind::Target);
            // The target prompt enters after the bottleneck, so it is
            // recorded but cannot change the vector.
            let f = model.pooled_dense(&c.volume, &t1)?;
            match &first {
                Some(f0) => set_b_identical &= f0.iter().zip(&f).all(|(a, b)| a.to_bits() == b.to_bits()),
                None => first = Some(f.clone()),
            }
            rows.push(FeatureRow {
                set: 'B',
                volume: c.volume.id.clone(),
                modality: m,
                region: c.volume.region.clone(),
                t1: t1.clone(),
                t2,
                group: g,
                pc: [0.0; 2],
                features: f,
            });
        }
    }
    let proj = pca2(&rows.iter().map(|r| r.features.clone()).collect::<Vec<_>>())?;
    for (r, pc) in rows.iter_mut().zip(&proj.coords) {
        r.pc = *pc;
    }
    let report = FeatureReport {
        rows_a,
        rows_b: rows.len() - rows_a,
        separation_a,
        set_b_identical,
        explained_variance: proj.variance,
    };
    Ok((rows, report))
}

/// Tab-separated table: `set volume modality region t1 t2 group pc1 pc2 f0..`.
pub fn feature_table(rows: &[FeatureRow]) -> String {
    let width = rows.first().map_or(0, |r| r.features.len());
    let mut s = String::from("set\tvolume\tmodality\tregion\tt1\tt2\tgroup\tpc1\tpc2");
    for k in 0..width {
        s.push_str(&format!("\tf{k}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.set, r.volume, r.modality, r.region, r.t1, r.t2, r.group, r.pc[0], r.pc[1]
        ));
        for v in &r.features {
            s.push_str(&format!("\t{v}"));
        }
        s.push('\n');
    }
    s
}

pub fn write_features(rows: &[FeatureRow], report: &FeatureReport, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let p = out.join("features.tsv");
    fs::write(&p, feature_table(rows)).map_err(Error::io(&p))?;
    write_json(&out.join("features.json"), report)
}

// --------------------------------------------------------------- prognosis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityScore {
    pub modality: String,
    pub ci: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrognosisReport {
    pub adapters: LoraReport,
    pub n_train_subjects: usize,
    pub n_test_subjects: usize,
    pub per_modality: Vec<ModalityScore>,
    pub fused_ci: f64,
    /// Rank correlation of the fused risk with the true lesion fraction.
    pub lesion_spearman: f64,
    pub bins: TimeBins,
    pub history: Vec<PrognosisEpoch>,
    pub seconds: f64,
}

impl PrognosisReport {
    pub fn best_single_ci(&self) -> f64 {
        self.per_modality.iter().map(|m| m.ci).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Fine-tune adapters and a risk head on the train split of a survival
/// cohort, then score the test split per modality and late-fused.
pub fn run_prognosis(
    base: &DualPromptModel<f32>,
    data: &Dataset,
    cfg: &PrognosisConfig,
    modalities: &[Modality],
    out: Option<&Path>,
) -> Result<(DualPromptModel<f32>, PrognosisReport)> {
    let start = Instant::now();
    let train_subjects = data.survival_split(Split::Train, modalities)?;
    let test_subjects = data.survival_split(Split::Test, modalities)?;
    let mut model = base.clone();
    prepare_prognosis(&mut model, cfg)?;
    let train_cases: Vec<_> = train_subjects.iter().flat_map(|s| s.cases.iter().cloned()).collect();
    let outcome = fine_tune_prognosis(&mut model, &train_cases, cfg, |_| Ok(()))?;

    let records: Vec<SurvivalRecord> = test_subjects.iter().map(|s| s.label.record()).collect();
    let mut per_subject: Vec<Vec<f64>> = vec![Vec::new(); test_subjects.len()];
    let mut per_modality = Vec::new();
    for &m in modalities {
        let mut risks = Vec::with_capacity(test_subjects.len());
        for (i, s) in test_subjects.iter().enumerate() {
            let c = s
                .cases
                .iter()
                .find(|c| c.volume.modality == m)
                .ok_or_else(|| Error::Usage(format!("{} has no {m} volume", s.label.subject_id)))?;
            let r = predict_risk(&model, &c.volume, &c.ehr)?.risk;
            per_subject[i].push(r);
            risks.push(r);
        }
        per_modality.push(ModalityScore {
            modality: m.as_str().into(),
            ci: concordance_index(&risks, &records)?,
        });
    }
    let fused: Vec<f64> = per_subject.iter().map(|r| late_fusion_risks(r)).collect::<std::result::Result<_, _>>()?;
    let fused_ci = concordance_index(&fused, &records)?;
    let lesion: Vec<f64> = test_subjects.iter().map(|s| s.label.lesion_fraction).collect();
    let report = PrognosisReport {
        adapters: outcome.report,
        n_train_subjects: train_subjects.len(),
        n_test_subjects: test_subjects.len(),
        per_modality,
        fused_ci,
        lesion_spearman: spearman(&fused, &lesion)?,
        bins: outcome.bins.clone(),
        history: outcome.history,
        seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out {
        ensure_dir(dir)?;
        save_adapter(&model, &cfg.lora, &outcome.bins, dir.join(ADAPTER_CHECKPOINT))?;
        write_json(&dir.join("prognosis.json"), &report)?;
    }
    Ok((model, report))
}

/// Region tokens of a dataset in manifest order (the mismatch cycle).
pub fn region_cycle(data: &Dataset) -> Vec<String> {
    data.manifest.spec.regions.iter().map(|r| r.name.clone()).collect()
}

/// Masks predicted for one case under matched prompts, in mask order.
pub fn matched_predictions(model: &DualPromptModel<f32>, case: &TrainCase) -> Result<Vec<Vec<u8>>> {
    let m = case.modality();
    let t1 = make_prompt(m, &case.volume.region, PromptKind::Context);
    let t2s: Vec<String> = case.masks.iter().map(|k| make_prompt(m, &k.organ, PromptKind::Target)).collect();
    Ok(predict_masks(model, case, &t1, &t2s)?)
}
