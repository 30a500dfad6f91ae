//! Prompt-ablation conditions and their evaluation.
//!
//! Mismatches replace a token with the next one in a fixed cycle:
//! modalities CT → MR → PET → CT, regions in the order given by the caller.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::dice;
use crate::model::DualPromptModel;
use crate::sampling::TrainCase;
use crate::text::{make_prompt, PromptKind};
use crate::train::{macro_dice, predict_masks};
use crate::volume::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Baseline,
    ModalityT1Mismatch,
    ModalityT2Mismatch,
    ModalityBothMismatch,
    RegionT1Mismatch,
    OrganControl,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::Baseline,
        Condition::ModalityT1Mismatch,
        Condition::ModalityT2Mismatch,
        Condition::ModalityBothMismatch,
        Condition::RegionT1Mismatch,
        Condition::OrganControl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Baseline => "baseline",
            Condition::ModalityT1Mismatch => "modality_t1_mismatch",
            Condition::ModalityT2Mismatch => "modality_t2_mismatch",
            Condition::ModalityBothMismatch => "modality_both_mismatch",
            Condition::RegionT1Mismatch => "region_t1_mismatch",
            Condition::OrganControl => "organ_control",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("unknown ablation condition {s:?}")))
    }
}

/// The region after `region` in `cycle`.
pub fn next_region(region: &str, cycle: &[String]) -> Result<String> {
    let i = cycle
        .iter()
        .position(|r| r == region)
        .ok_or_else(|| Error::InvalidArgument(alloc::format!("region {region:?} is not in the cycle")))?;
    Ok(cycle[(i + 1) % cycle.len()].clone())
}

/// Swap one token of a rendered prompt for another; the prompt must
/// contain `from` as a whole phrase.
pub fn swap_token(prompt: &str, from: &str, to: &str) -> Result<String> {
    let from = from.replace('_', " ");
    if !prompt.contains(&from) {
        return Err(Error::InvalidArgument(alloc::format!("{from:?} does not occur in {prompt:?}")));
    }
    Ok(prompt.replacen(&from, &to.replace('_', " "), 1))
}

/// Context and target prompts for one (case, organ) under a condition.
/// Organ control uses the correct prompts; its difference lies in how the
/// prediction is scored.
pub fn rewrite(
    cond: Condition,
    modality: Modality,
    region: &str,
    organ: &str,
    regions: &[String],
) -> Result<(String, String)> {
    let t1 = make_prompt(modality, region, PromptKind::Context);
    let t2 = make_prompt(modality, organ, PromptKind::Target);
    let m_from = modality.long_name();
    let m_to = modality.next().long_name();
    Ok(match cond {
        Condition::Baseline | Condition::OrganControl => (t1, t2),
        Condition::ModalityT1Mismatch => (swap_token(&t1, m_from, m_to)?, t2),
        Condition::ModalityT2Mismatch => (t1, swap_token(&t2, m_from, m_to)?),
        Condition::ModalityBothMismatch => (swap_token(&t1, m_from, m_to)?, swap_token(&t2, m_from, m_to)?),
        Condition::RegionT1Mismatch => (swap_token(&t1, region, &next_region(region, regions)?)?, t2),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: Condition,
    /// Macro mean DSC of the prompted organ against its own ground truth.
    pub mean_dsc: f64,
    /// Organ control only: mean DSC of the prediction against the next
    /// organ of the region, which is present but not prompted.
    pub unprompted_overlap: Option<f64>,
}

/// Evaluate one condition over preprocessed cases. `regions` fixes the
/// region cycle for region mismatches.
pub fn evaluate(
    model: &DualPromptModel<f32>,
    cases: &[TrainCase],
    cond: Condition,
    regions: &[String],
) -> Result<AblationRow> {
    let mut scores = Vec::with_capacity(cases.len());
    let mut overlaps = Vec::new();
    for c in cases {
        let m = c.modality();
        let region = &c.volume.region;
        // The context prompt never depends on the organ, so one backbone
        // pass per window serves every target prompt of the case.
        let mut t1 = String::new();
        let mut t2s = Vec::with_capacity(c.masks.len());
        for mask in &c.masks {
            let (a, b) = rewrite(cond, m, region, &mask.organ, regions)?;
            t1 = a;
            t2s.push(b);
        }
        let preds = predict_masks(model, c, &t1, &t2s)?;
        let mut row = Vec::with_capacity(c.masks.len());
        for (k, (pred, mask)) in preds.iter().zip(&c.masks).enumerate() {
            row.push(dice(pred, &mask.data)?);
            if cond == Condition::OrganControl && c.masks.len() > 1 {
                let other = &c.masks[(k + 1) % c.masks.len()];
                overlaps.push(dice(pred, &other.data)?);
            }
        }
        scores.push(row);
    }
    let unprompted_overlap = if cond == Condition::OrganControl {
        if overlaps.is_empty() {
            return Err(Error::UndefinedResult("organ control needs cases with two or more organs".into()));
        }
        Some(overlaps.iter().sum::<f64>() / overlaps.len() as f64)
    } else {
        None
    };
    Ok(AblationRow {
        condition: cond,
        mean_dsc: macro_dice(cases, &scores),
        unprompted_overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regions() -> Vec<String> {
        alloc::vec!["abdomen".into(), "thorax".into()]
    }

    #[test]
    fn names_round_trip() {
        for c in Condition::ALL {
            assert_eq!(c.as_str().parse::<Condition>().unwrap(), c);
        }
        assert!("nope".parse::<Condition>().is_err());
    }

    #[test]
    fn rewrite_rules() {
        let r = regions();
        let (t1, t2) = rewrite(Condition::Baseline, Modality::Ct, "abdomen", "left_kidney", &r).unwrap();
        assert_eq!(t1, "a computed tomography of abdomen");
        assert_eq!(t2, "a computed tomography of left kidney");
        let (t1, t2) = rewrite(Condition::ModalityT1Mismatch, Modality::Ct, "abdomen", "liver", &r).unwrap();
        assert_eq!(t1, "a magnetic resonance of abdomen");
        assert_eq!(t2, "a computed tomography of liver");
        let (t1, t2) = rewrite(Condition::ModalityT2Mismatch, Modality::Pet, "thorax", "heart", &r).unwrap();
        assert_eq!(t1, "a positron emission tomography of thorax");
        assert_eq!(t2, "a computed tomography of heart");
        let (t1, t2) = rewrite(Condition::ModalityBothMismatch, Modality::Mr, "thorax", "heart", &r).unwrap();
        assert_eq!(t1, "a positron emission tomography of thorax");
        assert_eq!(t2, "a positron emission tomography of heart");
        let (t1, _) = rewrite(Condition::RegionT1Mismatch, Modality::Mr, "thorax", "heart", &r).unwrap();
        assert_eq!(t1, "a magnetic resonance of abdomen");
        assert!(rewrite(Condition::RegionT1Mismatch, Modality::Mr, "pelvis", "x", &r).is_err());
    }
}
