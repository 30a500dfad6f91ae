//! Training-tuple sampling: a case, an organ of its region, and a crop.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Dims;
use crate::text::{make_prompt, PromptKind};
use crate::volume::{Mask, Modality, Volume};

/// One preprocessed (subject, modality) volume with its organ masks.
#[derive(Debug, Clone)]
pub struct TrainCase {
    pub volume: Volume,
    pub masks: Vec<Mask>,
}

impl TrainCase {
    pub fn modality(&self) -> Modality {
        self.volume.modality
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub case: usize,
    pub origin: [usize; 3],
    pub dims: Dims,
    pub modality: Modality,
    pub region: String,
    pub patch: Vec<f32>,
    pub t1: String,
    /// Index into `targets` of the organ that was drawn.
    pub focus: usize,
    /// `(t2, mask)` for every organ of the case, in mask order.
    pub targets: Vec<(String, Vec<u8>)>,
}

impl TrainSample {
    pub fn t2(&self) -> &str {
        &self.targets[self.focus].0
    }

    pub fn mask(&self) -> &[u8] {
        &self.targets[self.focus].1
    }
}

pub fn crop_f32(data: &[f32], d: Dims, origin: [usize; 3], c: Dims) -> Vec<f32> {
    let mut out = Vec::with_capacity(c.len());
    for z in 0..c.nz() {
        for y in 0..c.ny() {
            let s = d.index(origin[0], origin[1] + y, origin[2] + z);
            out.extend_from_slice(&data[s..s + c.nx()]);
        }
    }
    out
}

pub fn crop_u8(data: &[u8], d: Dims, origin: [usize; 3], c: Dims) -> Vec<u8> {
    let mut out = Vec::with_capacity(c.len());
    for z in 0..c.nz() {
        for y in 0..c.ny() {
            let s = d.index(origin[0], origin[1] + y, origin[2] + z);
            out.extend_from_slice(&data[s..s + c.nx()]);
        }
    }
    out
}

pub struct Sampler<'a> {
    pub cases: &'a [TrainCase],
    pub patch: Dims,
    pub foreground_prob: f64,
    /// Foreground voxel indices per case and organ.
    foreground: Vec<Vec<Vec<usize>>>,
}

impl<'a> Sampler<'a> {
    pub fn new(cases: &'a [TrainCase], patch: Dims) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Configuration("no training cases".into()));
        }
        for c in cases {
            if c.volume.dims.0.iter().zip(&patch.0).any(|(v, p)| v < p) {
                return Err(Error::Configuration(alloc::format!(
                    "case {} ({:?}) is smaller than the patch {:?}",
                    c.volume.id,
                    c.volume.dims.0,
                    patch.0
                )));
            }
            if c.masks.is_empty() {
                return Err(Error::Configuration(alloc::format!("case {} has no organs", c.volume.id)));
            }
        }
        let foreground: Vec<Vec<Vec<usize>>> = cases
            .iter()
            .map(|c| {
                c.masks
                    .iter()
                    .map(|m| {
                        m.data
                            .iter()
                            .enumerate()
                            .filter(|(_, &v)| v != 0)
                            .map(|(i, _)| i)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        // Every organ named by any case must be present somewhere.
        for (ci, c) in cases.iter().enumerate() {
            for (k, m) in c.masks.iter().enumerate() {
                if foreground[ci][k].is_empty() {
                    let present = cases.iter().enumerate().any(|(cj, other)| {
                        other
                            .masks
                            .iter()
                            .enumerate()
                            .any(|(kk, om)| om.organ == m.organ && !foreground[cj][kk].is_empty())
                    });
                    if !present {
                        return Err(Error::Configuration(alloc::format!(
                            "organ {} is absent from every training case",
                            m.organ
                        )));
                    }
                }
            }
        }
        Ok(Sampler {
            cases,
            patch,
            foreground_prob: 2.0 / 3.0,
            foreground,
        })
    }

    fn origin_containing<R: Rng + ?Sized>(&self, d: Dims, voxel: usize, rng: &mut R) -> [usize; 3] {
        let p = [voxel % d.nx(), (voxel / d.nx()) % d.ny(), voxel / (d.nx() * d.ny())];
        let mut o = [0usize; 3];
        for a in 0..3 {
            let lo = (p[a] + 1).saturating_sub(self.patch.0[a]);
            let hi = p[a].min(d.0[a] - self.patch.0[a]);
            o[a] = rng.random_range(lo..=hi);
        }
        o
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TrainSample {
        let ci = rng.random_range(0..self.cases.len());
        let case = &self.cases[ci];
        let d = case.volume.dims;
        let focus = rng.random_range(0..case.masks.len());
        let fg = &self.foreground[ci][focus];
        let origin = if !fg.is_empty() && rng.random_bool(self.foreground_prob) {
            let v = fg[rng.random_range(0..fg.len())];
            self.origin_containing(d, v, rng)
        } else {
            let mut o = [0usize; 3];
            for a in 0..3 {
                o[a] = rng.random_range(0..=d.0[a] - self.patch.0[a]);
            }
            o
        };
        let m = case.modality();
        let targets = case
            .masks
            .iter()
            .map(|mask| {
                (
                    make_prompt(m, &mask.organ, PromptKind::Target),
                    crop_u8(&mask.data, d, origin, self.patch),
                )
            })
            .collect();
        TrainSample {
            case: ci,
            origin,
            dims: self.patch,
            modality: m,
            region: case.volume.region.clone(),
            patch: crop_f32(&case.volume.data, d, origin, self.patch),
            t1: make_prompt(m, &case.volume.region, PromptKind::Context),
            focus,
            targets,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case(region: &str, organ: &str, fg: &[usize]) -> TrainCase {
        let d = Dims::cube(8);
        let mut m = Mask::empty(d, organ, "s");
        for &i in fg {
            m.data[i] = 1;
        }
        TrainCase {
            volume: Volume {
                data: (0..d.len()).map(|i| i as f32).collect(),
                dims: d,
                spacing: [1.5; 3],
                modality: Modality::Ct,
                region: region.into(),
                id: "s".into(),
            },
            masks: alloc::vec![m],
        }
    }

    #[test]
    fn foreground_rate_and_consistency() {
        let cases = alloc::vec![case("abdomen", "liver", &[0]), case("thorax", "heart", &[511])];
        let s = Sampler::new(&cases, Dims::cube(4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hits = 0;
        for _ in 0..1000 {
            let t = s.sample(&mut rng);
            assert!(t.t1.ends_with(&t.region));
            if t.mask().iter().any(|&v| v != 0) {
                hits += 1;
            }
        }
        assert!(hits >= 600, "{hits}");
    }

    #[test]
    fn deterministic_given_seed() {
        let cases = alloc::vec![case("abdomen", "liver", &[0, 100, 300])];
        let s = Sampler::new(&cases, Dims::cube(4)).unwrap();
        let a: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..20).map(|_| s.sample(&mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..20).map(|_| s.sample(&mut r)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn absent_organ_is_a_configuration_error() {
        let cases = alloc::vec![case("abdomen", "liver", &[])];
        assert!(matches!(Sampler::new(&cases, Dims::cube(4)), Err(Error::Configuration(_))));
    }
}
