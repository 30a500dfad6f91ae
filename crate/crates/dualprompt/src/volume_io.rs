//! Volume and mask files: a JSON sidecar plus a raw little-endian payload
//! in x-fastest order.
//!
//! `save_volume(v, "case.json")` writes `case.json` and `case.raw`. The
//! sidecar names its payload file relative to itself. Volumes store IEEE-754
//! `f32`, masks one byte per voxel.

use std::fs;
use std::path::{Path, PathBuf};

use dualprompt_core::tensor::Dims;
use dualprompt_core::volume::{Mask, Modality, Volume};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const VOLUME_DTYPE: &str = "float32-le";
pub const MASK_DTYPE: &str = "uint8";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub modality: String,
    pub region: String,
    pub id: String,
    pub dtype: String,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskHeader {
    pub dims: [usize; 3],
    pub organ: String,
    pub id: String,
    pub dtype: String,
    pub payload: String,
}

fn payload_path(sidecar: &Path) -> (PathBuf, String) {
    let raw = sidecar.with_extension("raw");
    let name = raw
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "payload.raw".into());
    (raw, name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, text).map_err(Error::io(path))
}

fn read_header<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, format!("malformed header: {e}")))
}

fn read_payload(sidecar: &Path, name: &str, expected: usize) -> Result<Vec<u8>> {
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let raw = dir.join(name);
    let bytes = fs::read(&raw).map_err(Error::io(&raw))?;
    if bytes.len() != expected {
        return Err(Error::format(
            &raw,
            format!("payload has {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    Ok(bytes)
}

fn checked_dims(path: &Path, dims: [usize; 3]) -> Result<Dims> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::format(path, "dimensions must be at least 1"));
    }
    Ok(Dims(dims))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    v.validate()?;
    let (raw, name) = payload_path(path);
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(Error::io(&raw))?;
    write_json(
        path,
        &VolumeHeader {
            dims: v.dims.0,
            spacing: v.spacing,
            modality: v.modality.as_str().into(),
            region: v.region.clone(),
            id: v.id.clone(),
            dtype: VOLUME_DTYPE.into(),
            payload: name,
        },
    )
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let h: VolumeHeader = read_header(path)?;
    if h.dtype != VOLUME_DTYPE {
        return Err(Error::format(path, format!("unsupported dtype {:?}", h.dtype)));
    }
    let modality: Modality = h
        .modality
        .parse()
        .map_err(|_| Error::format(path, format!("unknown modality {:?}", h.modality)))?;
    let dims = checked_dims(path, h.dims)?;
    if h.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::format(path, "spacing must be positive"));
    }
    let bytes = read_payload(path, &h.payload, dims.len() * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Volume {
        data,
        dims,
        spacing: h.spacing,
        modality,
        region: h.region,
        id: h.id,
    })
}

pub fn save_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if m.data.len() != m.dims.len() || m.data.iter().any(|&v| v > 1) {
        return Err(Error::format(path, "mask must be binary and match its dimensions"));
    }
    let (raw, name) = payload_path(path);
    fs::write(&raw, &m.data).map_err(Error::io(&raw))?;
    write_json(
        path,
        &MaskHeader {
            dims: m.dims.0,
            organ: m.organ.clone(),
            id: m.id.clone(),
            dtype: MASK_DTYPE.into(),
            payload: name,
        },
    )
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let h: MaskHeader = read_header(path)?;
    if h.dtype != MASK_DTYPE {
        return Err(Error::format(path, format!("unsupported dtype {:?}", h.dtype)));
    }
    let dims = checked_dims(path, h.dims)?;
    let data = read_payload(path, &h.payload, dims.len())?;
    if data.iter().any(|&v| v > 1) {
        return Err(Error::format(path, "mask values must be 0 or 1"));
    }
    Ok(Mask {
        data,
        dims,
        organ: h.organ,
        id: h.id,
    })
}

/// Write a probability map as a volume file (values in `[0, 1]`).
pub fn save_probability_map(like: &Volume, probs: &[f32], path: impl AsRef<Path>) -> Result<()> {
    save_volume(&like.with_data(probs.to_vec()), path)
}
