//! Spatial and intensity augmentation of training patches.
//!
//! Each enabled transform fires with probability 0.5. Rotation and scaling
//! share one affine resampling about the patch centre (trilinear for the
//! image, nearest neighbour for masks, edge-clamped). Intensity transforms
//! apply to the image only.

use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sampling::TrainSample;
use crate::tensor::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation: bool,
    pub scale: bool,
    pub brightness: bool,
    pub contrast: bool,
    pub gamma: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation: true,
            scale: true,
            brightness: true,
            contrast: true,
            gamma: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            rotation: false,
            scale: false,
            brightness: false,
            contrast: false,
            gamma: false,
        }
    }
}

/// Concrete transform parameters; the identity leaves a sample unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Rotation axis (0 = x, 1 = y, 2 = z) and angle in radians.
    pub axis: usize,
    pub angle: f64,
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub gamma: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        axis: 2,
        angle: 0.0,
        scale: 1.0,
        brightness: 0.0,
        contrast: 1.0,
        gamma: 1.0,
    };

    pub fn draw<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let mut p = Self::IDENTITY;
        if cfg.rotation && rng.random_bool(0.5) {
            p.axis = rng.random_range(0..3);
            p.angle = rng.random_range(-15.0..=15.0) * PI / 180.0;
        }
        if cfg.scale && rng.random_bool(0.5) {
            p.scale = rng.random_range(0.9..=1.1);
        }
        if cfg.brightness && rng.random_bool(0.5) {
            p.brightness = rng.random_range(-0.1..=0.1);
        }
        if cfg.contrast && rng.random_bool(0.5) {
            p.contrast = rng.random_range(0.9..=1.1);
        }
        if cfg.gamma && rng.random_bool(0.5) {
            p.gamma = rng.random_range(0.8..=1.25);
        }
        p
    }

    fn is_spatial_identity(&self) -> bool {
        self.angle == 0.0 && self.scale == 1.0
    }
}

/// Source coordinate for each output voxel of the inverse affine.
fn source_coords(d: Dims, p: &AugmentParams) -> Vec<[f64; 3]> {
    let c = [
        (d.nx() as f64 - 1.0) / 2.0,
        (d.ny() as f64 - 1.0) / 2.0,
        (d.nz() as f64 - 1.0) / 2.0,
    ];
    let (s, co) = p.angle.sin_cos();
    let (a, b) = match p.axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut out = Vec::with_capacity(d.len());
    for z in 0..d.nz() {
        for y in 0..d.ny() {
            for x in 0..d.nx() {
                let q = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let mut r = q;
                r[a] = co * q[a] + s * q[b];
                r[b] = -s * q[a] + co * q[b];
                out.push([
                    r[0] / p.scale + c[0],
                    r[1] / p.scale + c[1],
                    r[2] / p.scale + c[2],
                ]);
            }
        }
    }
    out
}

fn trilinear(data: &[f32], d: Dims, p: [f64; 3]) -> f32 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        let hi = (d.0[a] - 1) as f64;
        let v = p[a].clamp(0.0, hi);
        let f = v.floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(d.0[a] - 1);
        t[a] = v - f;
    }
    let at = |x: usize, y: usize, z: usize| data[d.index(x, y, z)] as f64;
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + (b - a) * t };
    let c00 = lerp(at(i0[0], i0[1], i0[2]), at(i1[0], i0[1], i0[2]), t[0]);
    let c10 = lerp(at(i0[0], i1[1], i0[2]), at(i1[0], i1[1], i0[2]), t[0]);
    let c01 = lerp(at(i0[0], i0[1], i1[2]), at(i1[0], i0[1], i1[2]), t[0]);
    let c11 = lerp(at(i0[0], i1[1], i1[2]), at(i1[0], i1[1], i1[2]), t[0]);
    let c0 = lerp(c00, c10, t[1]);
    let c1 = lerp(c01, c11, t[1]);
    lerp(c0, c1, t[2]) as f32
}

fn nearest(data: &[u8], d: Dims, p: [f64; 3]) -> u8 {
    let mut i = [0usize; 3];
    for a in 0..3 {
        i[a] = p[a].round().clamp(0.0, (d.0[a] - 1) as f64) as usize;
    }
    data[d.index(i[0], i[1], i[2])]
}

/// Apply concrete parameters to a sample in place.
pub fn apply(sample: &mut TrainSample, p: &AugmentParams) {
    let d = sample.dims;
    if !p.is_spatial_identity() {
        let src = source_coords(d, p);
        sample.patch = src.iter().map(|&q| trilinear(&sample.patch, d, q)).collect();
        for (_, mask) in sample.targets.iter_mut() {
            *mask = src.iter().map(|&q| nearest(mask, d, q)).collect();
        }
    }
    if p.gamma != 1.0 {
        let (lo, hi) = sample
            .patch
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let range = (hi - lo) as f64;
        if range > 0.0 {
            for v in sample.patch.iter_mut() {
                let u = (*v - lo) as f64 / range;
                *v = (u.powf(p.gamma) * range + lo as f64) as f32;
            }
        }
    }
    if p.contrast != 1.0 {
        let mean = sample.patch.iter().map(|&v| v as f64).sum::<f64>() / sample.patch.len() as f64;
        for v in sample.patch.iter_mut() {
            *v = ((*v as f64 - mean) * p.contrast + mean) as f32;
        }
    }
    if p.brightness != 0.0 {
        for v in sample.patch.iter_mut() {
            *v = (*v as f64 + p.brightness) as f32;
        }
    }
}

/// Draw parameters from `cfg` and apply them; returns what was applied.
pub fn augment<R: Rng + ?Sized>(sample: &mut TrainSample, cfg: &AugmentConfig, rng: &mut R) -> AugmentParams {
    let p = AugmentParams::draw(cfg, rng);
    apply(sample, &p);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;
    use alloc::string::String;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> TrainSample {
        let d = Dims::cube(8);
        TrainSample {
            case: 0,
            origin: [0; 3],
            dims: d,
            modality: Modality::Ct,
            region: "abdomen".into(),
            patch: (0..d.len()).map(|i| ((i * 7) % 13) as f32 / 3.0 - 2.0).collect(),
            t1: String::new(),
            focus: 0,
            targets: alloc::vec![(String::new(), (0..d.len()).map(|i| (i % 5 == 0) as u8).collect())],
        }
    }

    #[test]
    fn disabled_is_identity() {
        let mut s = sample();
        let orig = s.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            augment(&mut s, &AugmentConfig::none(), &mut rng);
        }
        assert_eq!(s, orig);
    }

    #[test]
    fn identity_parameters_leave_patch_unchanged() {
        let mut s = sample();
        let orig = s.clone();
        apply(&mut s, &AugmentParams::IDENTITY);
        for (a, b) in s.patch.iter().zip(&orig.patch) {
            assert!((a - b).abs() <= 1e-6);
        }
        assert_eq!(s.targets, orig.targets);
    }

    #[test]
    fn masks_stay_binary() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let mut s = sample();
            augment(&mut s, &AugmentConfig::default(), &mut rng);
            assert!(s.targets[0].1.iter().all(|&v| v <= 1));
            assert!(s.patch.iter().all(|v| v.is_finite()));
        }
    }
}
