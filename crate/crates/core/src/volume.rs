//! Volumes, masks and the preprocessing chain: isotropic resampling,
//! modality-specific intensity clipping and z-score normalisation.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[allow(unused_imports)]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Dims;

/// Spacing every volume is resampled to before training and inference (mm).
pub const TARGET_SPACING: [f64; 3] = [1.5, 1.5, 1.5];

/// CT window applied by [`clip_intensities`] (Hounsfield units).
pub const CT_WINDOW: (f32, f32) = (-990.0, 500.0);

/// Percentiles used for MR and PET clipping.
pub const MR_PET_PERCENTILES: (f64, f64) = (2.0, 98.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ct,
    Mr,
    Pet,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Ct, Modality::Mr, Modality::Pet];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::Mr => "mr",
            Modality::Pet => "pet",
        }
    }

    /// Long form used inside prompts.
    pub fn long_name(self) -> &'static str {
        match self {
            Modality::Ct => "computed tomography",
            Modality::Mr => "magnetic resonance",
            Modality::Pet => "positron emission tomography",
        }
    }

    /// Next modality in the fixed cycle CT → MR → PET → CT.
    pub fn next(self) -> Modality {
        match self {
            Modality::Ct => Modality::Mr,
            Modality::Mr => Modality::Pet,
            Modality::Pet => Modality::Ct,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ct" => Ok(Modality::Ct),
            "mr" => Ok(Modality::Mr),
            "pet" => Ok(Modality::Pet),
            other => Err(Error::invalid(alloc::format!("unknown modality {other:?}"))),
        }
    }
}

/// A scalar image in modality-native units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    pub dims: Dims,
    /// Millimetres per voxel along x, y, z.
    pub spacing: [f64; 3],
    pub modality: Modality,
    pub region: String,
    pub id: String,
}

/// A binary segmentation of one organ.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub data: Vec<u8>,
    pub dims: Dims,
    pub organ: String,
    pub id: String,
}

impl Volume {
    pub fn validate(&self) -> Result<()> {
        if self.dims.0.iter().any(|&d| d == 0) {
            return Err(Error::invalid("volume dimensions must be at least 1"));
        }
        if self.data.len() != self.dims.len() {
            return Err(Error::invalid("volume buffer does not match its dimensions"));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("voxel spacing must be positive"));
        }
        Ok(())
    }

    pub fn with_data(&self, data: Vec<f32>) -> Volume {
        Volume {
            data,
            dims: self.dims,
            spacing: self.spacing,
            modality: self.modality,
            region: self.region.clone(),
            id: self.id.clone(),
        }
    }
}

impl Mask {
    pub fn empty(dims: Dims, organ: &str, id: &str) -> Mask {
        Mask {
            data: alloc::vec![0; dims.len()],
            dims,
            organ: String::from(organ),
            id: String::from(id),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

fn resampled_dims(dims: Dims, from: [f64; 3], to: [f64; 3]) -> Dims {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let n = (dims.0[a] as f64 * from[a] / to[a]).round();
        out[a] = if n < 1.0 { 1 } else { n as usize };
    }
    Dims(out)
}

fn check_spacing(s: [f64; 3]) -> Result<()> {
    if s.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("target spacing must be positive"));
    }
    Ok(())
}

/// Continuous source index of output voxel `j` when mapping voxel centres.
#[inline]
fn source_coord(j: usize, ratio: f64, n: usize) -> f64 {
    let c = (j as f64 + 0.5) * ratio - 0.5;
    c.max(0.0).min((n - 1) as f64)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + t * (b - a)
}

/// Resample to `target_spacing` with trilinear interpolation.
///
/// Output dims are `round(n · old / new)` per axis (at least 1); voxel
/// centres are aligned at the volume's corner so a unit ratio reproduces the
/// input exactly.
pub fn resample_isotropic(v: &Volume, target_spacing: [f64; 3]) -> Result<Volume> {
    v.validate()?;
    check_spacing(target_spacing)?;
    let nd = resampled_dims(v.dims, v.spacing, target_spacing);
    let ratio: [f64; 3] = core::array::from_fn(|a| target_spacing[a] / v.spacing[a]);
    let d = v.dims;
    let mut out = Vec::with_capacity(nd.len());
    for z in 0..nd.nz() {
        let cz = source_coord(z, ratio[2], d.nz());
        let (z0, tz) = (cz.floor() as usize, (cz - cz.floor()) as f32);
        let z1 = (z0 + 1).min(d.nz() - 1);
        for y in 0..nd.ny() {
            let cy = source_coord(y, ratio[1], d.ny());
            let (y0, ty) = (cy.floor() as usize, (cy - cy.floor()) as f32);
            let y1 = (y0 + 1).min(d.ny() - 1);
            for x in 0..nd.nx() {
                let cx = source_coord(x, ratio[0], d.nx());
                let (x0, tx) = (cx.floor() as usize, (cx - cx.floor()) as f32);
                let x1 = (x0 + 1).min(d.nx() - 1);
                let at = |xx, yy, zz| v.data[d.index(xx, yy, zz)];
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), tx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), tx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), tx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), tx);
                out.push(lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz));
            }
        }
    }
    Ok(Volume {
        data: out,
        dims: nd,
        spacing: target_spacing,
        modality: v.modality,
        region: v.region.clone(),
        id: v.id.clone(),
    })
}

/// Nearest-neighbour counterpart of [`resample_isotropic`] for masks.
pub fn resample_mask(
    m: &Mask,
    spacing: [f64; 3],
    target_spacing: [f64; 3],
) -> Result<Mask> {
    check_spacing(spacing)?;
    check_spacing(target_spacing)?;
    let nd = resampled_dims(m.dims, spacing, target_spacing);
    let ratio: [f64; 3] = core::array::from_fn(|a| target_spacing[a] / spacing[a]);
    let d = m.dims;
    let mut out = Vec::with_capacity(nd.len());
    for z in 0..nd.nz() {
        let sz = source_coord(z, ratio[2], d.nz()).round() as usize;
        for y in 0..nd.ny() {
            let sy = source_coord(y, ratio[1], d.ny()).round() as usize;
            for x in 0..nd.nx() {
                let sx = source_coord(x, ratio[0], d.nx()).round() as usize;
                out.push(m.data[d.index(sx, sy, sz)]);
            }
        }
    }
    Ok(Mask {
        data: out,
        dims: nd,
        organ: m.organ.clone(),
        id: m.id.clone(),
    })
}

/// Percentile with linear interpolation between order statistics:
/// position `p / 100 · (n − 1)` in the sorted sample (the "inclusive"
/// convention).
pub fn percentile(values: &[f32], p: f64) -> f64 {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&sorted, p)
}

fn percentile_sorted(sorted: &[f32], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    let (a, b) = (sorted[lo] as f64, sorted[hi] as f64);
    a + t * (b - a)
}

/// CT: clamp to [-990, 500] HU. MR/PET: clamp to the volume's own 2nd and
/// 98th percentiles (see [`percentile`]).
pub fn clip_intensities(v: &Volume) -> Volume {
    let (lo, hi) = match v.modality {
        Modality::Ct => CT_WINDOW,
        Modality::Mr | Modality::Pet => {
            let mut sorted = v.data.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            (
                percentile_sorted(&sorted, MR_PET_PERCENTILES.0) as f32,
                percentile_sorted(&sorted, MR_PET_PERCENTILES.1) as f32,
            )
        }
    };
    v.with_data(v.data.iter().map(|&x| x.max(lo).min(hi)).collect())
}

/// Zero mean, unit (population) standard deviation over all voxels.
/// Volumes with standard deviation below 1e-8 map to all zeros.
pub fn znormalize(v: &Volume) -> Volume {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v
        .data
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if !(std >= 1e-8) {
        return v.with_data(alloc::vec![0.0; v.data.len()]);
    }
    v.with_data(
        v.data
            .iter()
            .map(|&x| ((x as f64 - mean) / std) as f32)
            .collect(),
    )
}

/// The full chain: resample to 1.5 mm isotropic, clip, z-normalise.
pub fn preprocess(v: &Volume) -> Result<Volume> {
    let r = resample_isotropic(v, TARGET_SPACING)?;
    Ok(znormalize(&clip_intensities(&r)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn vol(dims: Dims, spacing: [f64; 3], modality: Modality, data: Vec<f32>) -> Volume {
        Volume {
            data,
            dims,
            spacing,
            modality,
            region: "abdomen".into(),
            id: "t".into(),
        }
    }

    #[test]
    fn identity_resample_is_bit_exact() {
        let d = Dims::new(5, 4, 3);
        let data: Vec<f32> = (0..d.len()).map(|i| (i as f32 * 0.37).sin() * 100.0).collect();
        let v = vol(d, [1.5; 3], Modality::Ct, data);
        let r = resample_isotropic(&v, [1.5; 3]).unwrap();
        assert_eq!(r.dims, d);
        assert_eq!(r.data, v.data);
    }

    #[test]
    fn coarse_to_fine_doubles_dims() {
        let d = Dims::cube(10);
        let v = vol(d, [3.0; 3], Modality::Mr, vec![1.0; d.len()]);
        let r = resample_isotropic(&v, [1.5; 3]).unwrap();
        assert_eq!(r.dims, Dims::cube(20));
        assert_eq!(r.spacing, [1.5; 3]);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let d = Dims::new(7, 3, 5);
        let v = vol(d, [0.7, 2.2, 1.1], Modality::Pet, vec![3.25; d.len()]);
        let r = resample_isotropic(&v, [1.5; 3]).unwrap();
        assert!(r.data.iter().all(|&x| x == 3.25));
    }

    #[test]
    fn rejects_non_positive_spacing() {
        let d = Dims::cube(2);
        let v = vol(d, [1.0; 3], Modality::Ct, vec![0.0; 8]);
        assert!(resample_isotropic(&v, [1.0, 0.0, 1.0]).is_err());
        let bad = vol(d, [1.0, -1.0, 1.0], Modality::Ct, vec![0.0; 8]);
        assert!(resample_isotropic(&bad, [1.0; 3]).is_err());
    }

    #[test]
    fn mask_resample_stays_binary() {
        let d = Dims::cube(6);
        let mut m = Mask::empty(d, "liver", "x");
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = (i % 3 == 0) as u8;
        }
        let r = resample_mask(&m, [1.0, 2.0, 0.9], [1.5; 3]).unwrap();
        assert_eq!(r.dims, Dims::new(4, 8, 4));
        assert!(r.data.iter().all(|&v| v <= 1));
    }

    #[test]
    fn ct_window() {
        let v = vol(Dims::new(4, 1, 1), [1.5; 3], Modality::Ct, vec![-1200.0, 600.0, 0.0, -990.0]);
        let c = clip_intensities(&v);
        assert_eq!(c.data, vec![-990.0, 500.0, 0.0, -990.0]);
    }

    #[test]
    fn mr_percentiles_on_ramp() {
        let v = vol(Dims::new(100, 1, 1), [1.5; 3], Modality::Mr, (1..=100).map(|i| i as f32).collect());
        let c = clip_intensities(&v);
        let lo = c.data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = c.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!((lo - 2.98).abs() < 1e-5);
        assert!((hi - 98.02).abs() < 1e-5);
    }

    #[test]
    fn constant_mr_unchanged_by_clipping() {
        let v = vol(Dims::cube(3), [1.5; 3], Modality::Mr, vec![42.0; 27]);
        assert_eq!(clip_intensities(&v), v);
    }

    #[test]
    fn znormalize_two_values() {
        let v = vol(Dims::new(4, 1, 1), [1.5; 3], Modality::Mr, vec![0.0, 2.0, 0.0, 2.0]);
        assert_eq!(znormalize(&v).data, vec![-1.0, 1.0, -1.0, 1.0]);
        let c = vol(Dims::new(4, 1, 1), [1.5; 3], Modality::Mr, vec![5.0; 4]);
        assert_eq!(znormalize(&c).data, vec![0.0; 4]);
    }

    #[test]
    fn modality_strings() {
        for m in Modality::ALL {
            assert_eq!(m.as_str().parse::<Modality>().unwrap(), m);
        }
        assert!("xr".parse::<Modality>().is_err());
    }
}
