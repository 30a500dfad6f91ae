//! Prompt grammar, the frozen text encoder and the EHR prompt serializer.
//!
//! Prompt templates (normative):
//!
//! * context and target prompts: `a {modality long name} of {region|organ}`,
//!   with underscores in tokens rendered as spaces, e.g.
//!   `a computed tomography of left kidney`;
//! * EHR prompts: `predict the risk score of a {sex} patient, {age} years
//!   old, with {modality} imaging of the {region}, a weight of {weight}
//!   kilograms, and a history of {habits}`. Habits are `smoking` and
//!   `alcohol consumption` joined by ` and `; with neither the final clause
//!   reads `and no smoking or alcohol history`.
//!
//! The encoder lowercases, splits on every non-alphanumeric character,
//! hashes each token with 64-bit FNV-1a modulo the vocabulary size, averages
//! the corresponding table rows and L2-normalises the mean. The table is
//! drawn from a seeded ChaCha8 stream of standard normals, row-major
//! `vocab × dim`, so ports in other languages can reproduce it.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Modality;

pub const DEFAULT_VOCAB: usize = 4096;
pub const DEFAULT_TEXT_DIM: usize = 64;
pub const DEFAULT_TEXT_SEED: u64 = 0x5eed_7e47;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    /// T1: imaging modality and body region; drives FiLM.
    Context,
    /// T2: the structure to segment; drives the dynamic head.
    Target,
}

/// Render a context or target prompt.
pub fn make_prompt(modality: Modality, token: &str, kind: PromptKind) -> String {
    // Both kinds share one template; the kind only says which slot it fills.
    let _ = kind;
    format!("a {} of {}", modality.long_name(), token.replace('_', " "))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub t1: String,
    pub t2: String,
}

impl PromptPair {
    pub fn new(t1: impl Into<String>, t2: impl Into<String>) -> Result<Self> {
        let (t1, t2) = (t1.into().to_lowercase(), t2.into().to_lowercase());
        if t1.trim().is_empty() || t2.trim().is_empty() {
            return Err(Error::invalid("prompts must be non-empty"));
        }
        Ok(PromptPair { t1, t2 })
    }

    pub fn for_case(modality: Modality, region: &str, organ: &str) -> Self {
        PromptPair {
            t1: make_prompt(modality, region, PromptKind::Context),
            t2: make_prompt(modality, organ, PromptKind::Target),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub vector: Vec<f32>,
    pub source_text: String,
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Frozen hashed bag-of-tokens embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub vocab: usize,
    pub dim: usize,
    pub seed: u64,
    pub frozen: bool,
    table: Vec<f32>,
}

impl Default for TextEncoder {
    fn default() -> Self {
        TextEncoder::new(DEFAULT_VOCAB, DEFAULT_TEXT_DIM, DEFAULT_TEXT_SEED)
    }
}

impl TextEncoder {
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..vocab * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v as f32
            })
            .collect();
        TextEncoder {
            vocab,
            dim,
            seed,
            frozen: true,
            table,
        }
    }

    pub fn table(&self) -> &[f32] {
        &self.table
    }

    pub fn token_id(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.vocab as u64) as usize
    }

    pub fn encode(&self, text: &str) -> Result<PromptEmbedding> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty prompt"));
        }
        let mut acc = alloc::vec![0.0f64; self.dim];
        for t in &tokens {
            let row = &self.table[self.token_id(t) * self.dim..][..self.dim];
            for (a, &r) in acc.iter_mut().zip(row) {
                *a += r as f64;
            }
        }
        let n = tokens.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(Error::UndefinedResult("prompt embedding has zero norm".into()));
        }
        Ok(PromptEmbedding {
            vector: acc.iter().map(|a| (a / norm) as f32).collect(),
            source_text: text.to_lowercase(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

/// Structured patient covariates; every field is required for serialisation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EhrRecord {
    pub sex: Option<Sex>,
    pub age: Option<u32>,
    pub modality: Option<Modality>,
    pub region: Option<String>,
    pub weight: Option<f64>,
    pub smoking: Option<bool>,
    pub alcohol: Option<bool>,
}

fn missing(field: &str) -> Error {
    Error::InvalidArgument(format!("missing required EHR field `{field}`"))
}

fn fmt_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Fill the prognosis prompt template (lowercased).
pub fn serialize_ehr(r: &EhrRecord) -> Result<String> {
    let sex = r.sex.ok_or_else(|| missing("sex"))?;
    let age = r.age.ok_or_else(|| missing("age"))?;
    let modality = r.modality.ok_or_else(|| missing("modality"))?;
    let region = r.region.as_deref().ok_or_else(|| missing("region"))?;
    let weight = r.weight.ok_or_else(|| missing("weight"))?;
    let smoking = r.smoking.ok_or_else(|| missing("smoking"))?;
    let alcohol = r.alcohol.ok_or_else(|| missing("alcohol"))?;
    let mut habits: Vec<&str> = Vec::new();
    if smoking {
        habits.push("smoking");
    }
    if alcohol {
        habits.push("alcohol consumption");
    }
    let history = if habits.is_empty() {
        String::from("no smoking or alcohol history")
    } else {
        format!("a history of {}", habits.join(" and "))
    };
    Ok(format!(
        "predict the risk score of a {} patient, {} years old, with {} imaging of the {}, a weight of {} kilograms, and {}",
        sex.as_str(),
        age,
        modality.as_str(),
        region.replace('_', " "),
        fmt_number(weight),
        history
    )
    .to_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn figure_style_prompts() {
        assert_eq!(
            make_prompt(Modality::Ct, "abdomen", PromptKind::Context),
            "a computed tomography of abdomen"
        );
        assert_eq!(
            make_prompt(Modality::Ct, "spleen", PromptKind::Target),
            "a computed tomography of spleen"
        );
        assert_eq!(
            make_prompt(Modality::Mr, "liver", PromptKind::Target),
            "a magnetic resonance of liver"
        );
        assert_eq!(
            make_prompt(Modality::Ct, "left_kidney", PromptKind::Target),
            "a computed tomography of left kidney"
        );
    }

    #[test]
    fn encode_is_unit_norm_and_deterministic() {
        let enc = TextEncoder::default();
        let a = enc.encode("a computed tomography of liver").unwrap();
        let b = enc.encode("a computed tomography of liver").unwrap();
        assert_eq!(a, b);
        let n: f64 = a.vector.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
        let c = enc.encode("A COMPUTED TOMOGRAPHY OF LIVER").unwrap();
        assert_eq!(a.vector, c.vector);
    }

    #[test]
    fn organ_token_changes_embedding() {
        let enc = TextEncoder::default();
        let a = enc.encode("a computed tomography of liver").unwrap().vector;
        let b = enc.encode("a computed tomography of spleen").unwrap().vector;
        let cos: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos < 0.999);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let enc = TextEncoder::default();
        assert!(enc.encode("").is_err());
        assert!(enc.encode(" ,; ").is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    fn full_record() -> EhrRecord {
        EhrRecord {
            sex: Some(Sex::Male),
            age: Some(52),
            modality: Some(Modality::Ct),
            region: Some("head & neck".into()),
            weight: Some(82.0),
            smoking: Some(true),
            alcohol: Some(true),
        }
    }

    #[test]
    fn ehr_sentence_verbatim() {
        assert_eq!(
            serialize_ehr(&full_record()).unwrap(),
            "predict the risk score of a male patient, 52 years old, with ct imaging of the head & neck, a weight of 82 kilograms, and a history of smoking and alcohol consumption"
        );
    }

    #[test]
    fn ehr_without_habits() {
        let mut r = full_record();
        r.smoking = Some(false);
        r.alcohol = Some(false);
        assert!(serialize_ehr(&r).unwrap().ends_with("no smoking or alcohol history"));
        r.alcohol = Some(true);
        assert!(serialize_ehr(&r)
            .unwrap()
            .ends_with("and a history of alcohol consumption"));
    }

    #[test]
    fn ehr_missing_field_is_named() {
        let mut r = full_record();
        r.age = None;
        match serialize_ehr(&r) {
            Err(Error::InvalidArgument(m)) => assert!(m.contains("age")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
