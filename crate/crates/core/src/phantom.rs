//! Deterministic multi-modality phantoms with ground-truth organ masks and
//! planted survival outcomes.
//!
//! Each subject belongs to one region (`regions[index % n_regions]`). Organ
//! geometry is jittered per subject; every requested modality renders the
//! same label map with its own intensity transfer, so renders of one case
//! are co-registered by construction.
//!
//! Organ intensities are expressed in contrast units relative to the
//! background and mapped to native units per modality:
//!
//! | modality | background | unit    | noise σ | extra                      |
//! |----------|-----------:|--------:|--------:|----------------------------|
//! | CT (HU)  | 40         | 110     | 15      |                            |
//! | MR (a.u.)| 100        | 120     | 10      | smooth multiplicative bias |
//! | PET (SUV)| 0.05       | 0.5     | 0.05    | lesion organ hottest       |

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SurvivalRecord;
use crate::tensor::Dims;
use crate::text::{fnv1a64, EhrRecord, Sex};
use crate::volume::{self, Mask, Modality, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Ellipsoid,
    Cuboid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganDef {
    pub name: String,
    pub shape: Shape,
    /// Canonical centre as a fraction of the volume extent.
    pub center: [f64; 3],
    /// Semi-axes (ellipsoid) or half-widths (cuboid) as fractions of extent.
    pub half_extent: [f64; 3],
    /// Contrast level per modality, indexed by [`Modality::index`].
    pub levels: [f64; 3],
    /// The designated hot "lesion" organ whose size drives survival.
    pub lesion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDef {
    pub name: String,
    /// Painting order: earlier organs win where jittered shapes overlap.
    pub organs: Vec<OrganDef>,
}

impl RegionDef {
    pub fn organ_names(&self) -> Vec<String> {
        self.organs.iter().map(|o| o.name.clone()).collect()
    }

    pub fn lesion(&self) -> Option<&OrganDef> {
        self.organs.iter().find(|o| o.lesion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub regions: Vec<RegionDef>,
    pub modalities: Vec<Modality>,
    pub volume_dims: Dims,
    pub n_subjects: usize,
    pub seed: u64,
}

fn organ(
    name: &str,
    shape: Shape,
    center: [f64; 3],
    half_extent: [f64; 3],
    levels: [f64; 3],
    lesion: bool,
) -> OrganDef {
    OrganDef {
        name: name.to_string(),
        shape,
        center,
        half_extent,
        levels,
        lesion,
    }
}

/// Abdomen: liver (lesion), spleen, left kidney, pancreas.
pub fn abdomen() -> RegionDef {
    use Shape::*;
    RegionDef {
        name: "abdomen".into(),
        organs: vec![
            organ("liver", Ellipsoid, [0.28, 0.30, 0.5], [0.22, 0.20, 0.26], [2.0, 5.0, 5.0], true),
            organ("spleen", Ellipsoid, [0.76, 0.28, 0.5], [0.14, 0.16, 0.20], [3.0, 2.0, 3.0], false),
            organ("left_kidney", Ellipsoid, [0.74, 0.74, 0.5], [0.12, 0.16, 0.20], [-3.0, 4.0, 4.0], false),
            organ("pancreas", Cuboid, [0.30, 0.74, 0.5], [0.16, 0.09, 0.15], [-2.0, 3.0, 2.0], false),
        ],
    }
}

/// Thorax: heart (lesion), left lung, right lung, spinal cord.
pub fn thorax() -> RegionDef {
    use Shape::*;
    RegionDef {
        name: "thorax".into(),
        organs: vec![
            organ("heart", Ellipsoid, [0.50, 0.62, 0.5], [0.21, 0.18, 0.27], [2.0, 4.0, 5.0], true),
            organ("left_lung", Ellipsoid, [0.80, 0.38, 0.5], [0.15, 0.28, 0.33], [-3.0, 5.0, 2.0], false),
            organ("right_lung", Ellipsoid, [0.20, 0.38, 0.5], [0.15, 0.28, 0.33], [-2.0, 3.0, 3.0], false),
            organ("spinal_cord", Cuboid, [0.50, 0.14, 0.5], [0.06, 0.06, 0.42], [3.0, 2.0, 4.0], false),
        ],
    }
}

impl PhantomSpec {
    /// Two regions × three modalities × four organs, 24 subjects of 48³.
    pub fn desk_default() -> Self {
        PhantomSpec {
            regions: vec![abdomen(), thorax()],
            modalities: Modality::ALL.to_vec(),
            volume_dims: Dims::cube(48),
            n_subjects: 24,
            seed: 20_240_601,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 1 {
            return Err(Error::invalid("n_subjects must be at least 1"));
        }
        if self.volume_dims.0.iter().any(|&d| d < 16) {
            return Err(Error::invalid("phantom dims must be at least 16 per axis"));
        }
        if self.regions.is_empty() || self.modalities.is_empty() {
            return Err(Error::invalid("at least one region and one modality are required"));
        }
        for r in &self.regions {
            for (i, o) in r.organs.iter().enumerate() {
                if r.organs[..i].iter().any(|p| p.name == o.name) {
                    return Err(Error::invalid(alloc::format!(
                        "organ {} repeated in region {}",
                        o.name,
                        r.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn region(&self, name: &str) -> Result<&RegionDef> {
        self.regions
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::invalid(alloc::format!("unknown region {name:?}")))
    }

    pub fn subject_region(&self, index: usize) -> &RegionDef {
        &self.regions[index % self.regions.len()]
    }

    pub fn subject_id(&self, index: usize) -> String {
        alloc::format!("subj{index:04}")
    }
}

pub struct PhantomCase {
    pub subject_id: String,
    pub region: String,
    /// One per requested modality, in the spec's order.
    pub volumes: Vec<Volume>,
    /// One per organ of the region, in painting order.
    pub masks: Vec<Mask>,
    /// Lesion voxels over all voxels.
    pub lesion_fraction: f64,
}

impl PhantomCase {
    pub fn volume(&self, m: Modality) -> Option<&Volume> {
        self.volumes.iter().find(|v| v.modality == m)
    }

    pub fn mask(&self, organ: &str) -> Option<&Mask> {
        self.masks.iter().find(|m| m.organ == organ)
    }
}

/// Placed organ geometry in voxel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Placement {
    pub shape: Shape,
    pub center: [f64; 3],
    pub half: [f64; 3],
}

impl Placement {
    #[inline]
    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self.shape {
            Shape::Ellipsoid => {
                let mut s = 0.0;
                for a in 0..3 {
                    let t = (p[a] - self.center[a]) / self.half[a];
                    s += t * t;
                }
                s <= 1.0
            }
            Shape::Cuboid => (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.half[a]),
        }
    }

    pub fn analytic_volume(&self) -> f64 {
        let [a, b, c] = self.half;
        match self.shape {
            Shape::Ellipsoid => 4.0 / 3.0 * PI * a * b * c,
            Shape::Cuboid => 8.0 * a * b * c,
        }
    }

    /// Boolean raster over `dims`, voxel `(x, y, z)` sampled at its index.
    pub fn rasterize(&self, dims: Dims) -> Vec<bool> {
        let mut out = vec![false; dims.len()];
        for z in 0..dims.nz() {
            for y in 0..dims.ny() {
                for x in 0..dims.nx() {
                    out[dims.index(x, y, z)] = self.contains([x as f64, y as f64, z as f64]);
                }
            }
        }
        out
    }
}

fn case_rng(seed: u64, region: &str, index: usize, stream: u64) -> ChaCha8Rng {
    let mix = seed
        ^ fnv1a64(region.as_bytes()).rotate_left(17)
        ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut rng = ChaCha8Rng::seed_from_u64(mix);
    rng.set_stream(stream);
    rng
}

/// Jittered organ placements for one subject.
pub fn place_organs(spec: &PhantomSpec, region: &RegionDef, index: usize) -> Vec<Placement> {
    let mut rng = case_rng(spec.seed, &region.name, index, 0);
    let d = spec.volume_dims;
    region
        .organs
        .iter()
        .map(|o| {
            let global = if o.lesion {
                rng.random_range(0.88..1.2)
            } else {
                1.0
            };
            let mut center = [0.0; 3];
            let mut half = [0.0; 3];
            for a in 0..3 {
                let n = d.0[a] as f64;
                let jitter: f64 = rng.random_range(-0.03..0.03);
                let scale: f64 = if o.lesion {
                    global * rng.random_range(0.95..1.05)
                } else {
                    rng.random_range(0.9..1.1)
                };
                center[a] = (o.center[a] + jitter) * n;
                half[a] = o.half_extent[a] * scale * n;
            }
            Placement {
                shape: o.shape,
                center,
                half,
            }
        })
        .collect()
}

/// Label map: 0 background, `k + 1` for organ `k`; earlier organs win overlaps.
pub fn label_map(dims: Dims, placements: &[Placement]) -> Vec<u8> {
    let mut labels = vec![0u8; dims.len()];
    for (k, p) in placements.iter().enumerate() {
        let raster = p.rasterize(dims);
        for (l, &inside) in labels.iter_mut().zip(&raster) {
            if inside && *l == 0 {
                *l = (k + 1) as u8;
            }
        }
    }
    labels
}

struct Transfer {
    background: f64,
    unit: f64,
    noise: f64,
}

fn transfer(m: Modality) -> Transfer {
    match m {
        Modality::Ct => Transfer {
            background: 40.0,
            unit: 110.0,
            noise: 15.0,
        },
        Modality::Mr => Transfer {
            background: 100.0,
            unit: 120.0,
            noise: 10.0,
        },
        Modality::Pet => Transfer {
            background: 0.05,
            unit: 0.5,
            noise: 0.05,
        },
    }
}

fn render(
    spec: &PhantomSpec,
    region: &RegionDef,
    index: usize,
    labels: &[u8],
    m: Modality,
) -> Vec<f32> {
    let mut rng = case_rng(spec.seed, &region.name, index, 1 + m.index() as u64);
    let t = transfer(m);
    let noise = Normal::new(0.0, t.noise).expect("finite noise");
    let d = spec.volume_dims;
    let (phx, phy, phz): (f64, f64, f64) = (
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    );
    let mut out = Vec::with_capacity(d.len());
    for z in 0..d.nz() {
        for y in 0..d.ny() {
            for x in 0..d.nx() {
                let l = labels[d.index(x, y, z)];
                let level = if l == 0 {
                    0.0
                } else {
                    region.organs[(l - 1) as usize].levels[m.index()]
                };
                let mut v = t.background + t.unit * level;
                if m == Modality::Mr {
                    let (fx, fy, fz) = (
                        x as f64 / d.nx() as f64,
                        y as f64 / d.ny() as f64,
                        z as f64 / d.nz() as f64,
                    );
                    let bias = 1.0
                        + 0.08 * (2.0 * PI * 0.6 * fx + phx).sin()
                        + 0.06 * (2.0 * PI * 0.5 * fy + phy).cos()
                        + 0.04 * (2.0 * PI * 0.4 * fz + phz).sin();
                    v *= bias;
                }
                v += noise.sample(&mut rng);
                if m == Modality::Pet {
                    v = v.max(0.0);
                }
                out.push(v as f32);
            }
        }
    }
    out
}

/// Smallest distance, in standard deviations of the preprocessed volume,
/// between any organ's mean intensity and the background mean.
pub fn learnability_margin(preprocessed: &Volume, labels: &[u8], n_organs: usize) -> f64 {
    let mut sums = vec![0.0f64; n_organs + 1];
    let mut counts = vec![0usize; n_organs + 1];
    for (&v, &l) in preprocessed.data.iter().zip(labels) {
        sums[l as usize] += v as f64;
        counts[l as usize] += 1;
    }
    let bg = sums[0] / counts[0].max(1) as f64;
    (1..=n_organs)
        .filter(|&k| counts[k] > 0)
        .map(|k| (sums[k] / counts[k] as f64 - bg).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Generate one subject. Deterministic in `(spec.seed, region, index)`.
pub fn generate_case(spec: &PhantomSpec, region: &str, index: usize) -> Result<PhantomCase> {
    spec.validate()?;
    let rdef = spec.region(region)?;
    let d = spec.volume_dims;
    let placements = place_organs(spec, rdef, index);
    let labels = label_map(d, &placements);
    let subject_id = spec.subject_id(index);

    let masks: Vec<Mask> = rdef
        .organs
        .iter()
        .enumerate()
        .map(|(k, o)| Mask {
            data: labels.iter().map(|&l| (l as usize == k + 1) as u8).collect(),
            dims: d,
            organ: o.name.clone(),
            id: subject_id.clone(),
        })
        .collect();

    let mut volumes = Vec::with_capacity(spec.modalities.len());
    for &m in &spec.modalities {
        let v = Volume {
            data: render(spec, rdef, index, &labels, m),
            dims: d,
            spacing: volume::TARGET_SPACING,
            modality: m,
            region: rdef.name.clone(),
            id: subject_id.clone(),
        };
        let margin = learnability_margin(&volume::preprocess(&v)?, &labels, rdef.organs.len());
        if margin < 1.0 {
            return Err(Error::Configuration(alloc::format!(
                "{subject_id}/{m}: organ contrast {margin:.2} sd is below the learnability floor"
            )));
        }
        volumes.push(v);
    }

    let lesion_fraction = match rdef.organs.iter().position(|o| o.lesion) {
        Some(k) => masks[k].count() as f64 / d.len() as f64,
        None => 0.0,
    };
    Ok(PhantomCase {
        subject_id,
        region: rdef.name.clone(),
        volumes,
        masks,
        lesion_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 75/5/20 subject split: `round(0.75 n)` train, `floor(0.05 n)` validation,
/// remainder test, over a seeded permutation of subject indices.
pub fn split_subjects(n: usize, seed: u64) -> Vec<Split> {
    let n_train = ((0.75 * n as f64).round() as usize).min(n);
    let n_val = ((0.05 * n as f64).floor() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995);
    order.shuffle(&mut rng);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Survival outcome plus the EHR covariates that accompany it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectOutcome {
    pub record: SurvivalRecord,
    pub sex: Sex,
    pub age: u32,
    pub weight: f64,
    pub smoking: bool,
    pub alcohol: bool,
    /// The planted log-hazard, kept for diagnostics.
    pub log_hazard: f64,
}

impl SubjectOutcome {
    pub fn ehr(&self, modality: Modality, region: &str) -> EhrRecord {
        EhrRecord {
            sex: Some(self.sex),
            age: Some(self.age),
            modality: Some(modality),
            region: Some(region.to_string()),
            weight: Some(self.weight),
            smoking: Some(self.smoking),
            alcohol: Some(self.alcohol),
        }
    }
}

/// Nominal (unjittered) lesion fraction of a region.
pub fn nominal_lesion_fraction(region: &RegionDef) -> Option<f64> {
    let o = region.lesion()?;
    let [a, b, c] = o.half_extent;
    Some(match o.shape {
        Shape::Ellipsoid => 4.0 / 3.0 * PI * a * b * c,
        Shape::Cuboid => 8.0 * a * b * c,
    })
}

/// Plant a survival outcome for a generated case.
///
/// Log-hazard is `3·ln(f / f₀) + 0.4·smoking + 0.3·alcohol + 0.02·(age − 60)
/// + N(0, 0.25²)` where `f` is the lesion volume fraction and `f₀` its nominal
/// value; event times are exponential with rate `exp(log-hazard) / 24`
/// (months), and 20 % of subjects are independently censored at a uniform
/// fraction of their event time.
pub fn plant_outcome(spec: &PhantomSpec, case: &PhantomCase, index: usize) -> Result<SubjectOutcome> {
    let region = spec.region(&case.region)?;
    let f0 = nominal_lesion_fraction(region)
        .ok_or_else(|| Error::Configuration(alloc::format!("region {} has no lesion organ", region.name)))?;
    let mut rng = case_rng(spec.seed, &case.region, index, 99);
    let sex = if rng.random_bool(0.5) {
        Sex::Male
    } else {
        Sex::Female
    };
    let age: u32 = rng.random_range(40..=80);
    let weight: f64 = rng.random_range(55..=100) as f64;
    let smoking = rng.random_bool(0.4);
    let alcohol = rng.random_bool(0.3);
    let eps: f64 = Normal::new(0.0, 0.25).expect("finite").sample(&mut rng);
    let lh = 3.0 * (case.lesion_fraction.max(1e-9) / f0).ln()
        + 0.4 * smoking as u8 as f64
        + 0.3 * alcohol as u8 as f64
        + 0.02 * (age as f64 - 60.0)
        + eps;
    let rate = lh.exp() / 24.0;
    let t_event: f64 = Exp::new(rate).expect("positive rate").sample(&mut rng);
    let censored = rng.random_bool(0.2);
    let u: f64 = rng.random_range(0.05..1.0);
    let (time, event) = if censored {
        (t_event * u, false)
    } else {
        (t_event, true)
    };
    Ok(SubjectOutcome {
        record: SurvivalRecord {
            subject_id: case.subject_id.clone(),
            time: time.max(1e-3),
            event,
        },
        sex,
        age,
        weight,
        smoking,
        alcohol,
        log_hazard: lh,
    })
}
