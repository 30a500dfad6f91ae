//! Model checkpoints.
//!
//! Layout: the 8-byte magic `DPCKPT\0\x01`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then every listed parameter as little-endian
//! `f32` values in header order.
//!
//! Base checkpoints hold the segmentation model (FiLM generator, backbone,
//! head generator). Adapter checkpoints hold only the low-rank adapters and
//! the risk head, and record the SHA-256 of the base checkpoint they were
//! trained on; loading onto any other base fails.

use std::fs;
use std::path::Path;

use dualprompt_core::lora::{lora_report, LoraAdapter, LoraConfig};
use dualprompt_core::metrics::TimeBins;
use dualprompt_core::model::{DualPromptModel, ModelConfig};
use dualprompt_core::nn::{Param, Parameterized};
use dualprompt_core::prognosis::PrognosisHead;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"DPCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Base,
    Adapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterInfo {
    pub base_sha256: String,
    pub lora: LoraConfig,
    pub layers: Vec<String>,
    pub head_hidden: usize,
    pub bins: TimeBins,
    /// Risk-head input standardisation (per-channel shift and scale).
    pub input_shift: Vec<f32>,
    pub input_scale: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<AdapterInfo>,
}

fn is_adapter_param(name: &str) -> bool {
    name.contains(".lora.") || name.starts_with("prognosis.")
}

fn collect(model: &mut DualPromptModel<f32>, keep: impl Fn(&str) -> bool) -> (Vec<ParamEntry>, Vec<u8>) {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    model.visit_params("", &mut |name: &str, p: &mut Param<f32>| {
        if keep(name) {
            entries.push(ParamEntry {
                name: name.to_string(),
                shape: p.shape.clone(),
            });
            for v in &p.value {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    });
    (entries, payload)
}

fn encode(header: &CheckpointHeader, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(Error::json("<checkpoint header>"))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

fn decode<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointHeader, &'a [u8])> {
    if bytes.len() < 16 || bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "header length exceeds file size"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::format(path, format!("malformed header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let payload = &bytes[end..];
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>() * 4).sum();
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    Ok((header, payload))
}

/// Copy payload values into the parameters named by `entries`; every
/// entry must match a parameter of the same shape, and every parameter
/// accepted by `keep` must be covered.
fn fill(
    path: &Path,
    model: &mut DualPromptModel<f32>,
    entries: &[ParamEntry],
    payload: &[u8],
    keep: impl Fn(&str) -> bool,
) -> Result<()> {
    let mut offsets = std::collections::HashMap::new();
    let mut off = 0usize;
    for e in entries {
        let n = e.shape.iter().product::<usize>();
        offsets.insert(e.name.as_str(), (off, e.shape.clone()));
        off += n * 4;
    }
    let mut problem: Option<String> = None;
    let mut seen = 0usize;
    model.visit_params("", &mut |name: &str, p: &mut Param<f32>| {
        if !keep(name) || problem.is_some() {
            return;
        }
        match offsets.get(name) {
            None => problem = Some(format!("parameter {name} missing from checkpoint")),
            Some((_, shape)) if *shape != p.shape => {
                problem = Some(format!("parameter {name}: shape {shape:?}, model expects {:?}", p.shape));
            }
            Some((o, _)) => {
                for (i, v) in p.value.iter_mut().enumerate() {
                    let b = &payload[o + 4 * i..o + 4 * i + 4];
                    *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                }
                seen += 1;
            }
        }
    });
    if let Some(msg) = problem {
        return Err(Error::format(path, msg));
    }
    if seen != entries.len() {
        return Err(Error::format(path, "checkpoint lists parameters the model does not have"));
    }
    Ok(())
}

/// Serialised bytes of the base part of a model (adapters and risk head
/// excluded).
pub fn encode_base(model: &DualPromptModel<f32>) -> Result<Vec<u8>> {
    let mut m = model.clone();
    let (params, payload) = collect(&mut m, |n| !is_adapter_param(n));
    encode(
        &CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Base,
            config: model.cfg.clone(),
            params,
            adapter: None,
        },
        &payload,
    )
}

pub fn base_checksum(model: &DualPromptModel<f32>) -> Result<String> {
    let digest = Sha256::digest(encode_base(model)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_base(model: &DualPromptModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_base(model)?).map_err(Error::io(path))
}

pub fn load_base(path: impl AsRef<Path>) -> Result<DualPromptModel<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let (header, payload) = decode(path, &bytes)?;
    if header.kind != CheckpointKind::Base {
        return Err(Error::format(path, "expected a base checkpoint"));
    }
    let mut model = DualPromptModel::new(header.config.clone(), 0)?;
    fill(path, &mut model, &header.params, payload, |n| !is_adapter_param(n))?;
    Ok(model)
}

/// Save the adapters and risk head of a fine-tuned model.
pub fn save_adapter(
    model: &DualPromptModel<f32>,
    lora: &LoraConfig,
    bins: &TimeBins,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let head = model
        .prognosis
        .as_ref()
        .ok_or_else(|| Error::Usage("model has no risk head to save".into()))?;
    let mut m = model.clone();
    let layers = lora_report(&mut m).layers;
    let (params, payload) = collect(&mut m, is_adapter_param);
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Adapter,
        config: model.cfg.clone(),
        params,
        adapter: Some(AdapterInfo {
            base_sha256: base_checksum(model)?,
            lora: *lora,
            layers,
            head_hidden: head.fc1.fan_out,
            bins: bins.clone(),
            input_shift: head.input_shift.clone(),
            input_scale: head.input_scale.clone(),
        }),
    };
    fs::write(path, encode(&header, &payload)?).map_err(Error::io(path))
}

/// Attach the adapters and risk head stored at `path` to `model`, which
/// must be the exact base they were trained on. Returns the time bins.
pub fn load_adapter(model: &mut DualPromptModel<f32>, path: impl AsRef<Path>) -> Result<TimeBins> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let (header, payload) = decode(path, &bytes)?;
    let info = match (&header.kind, &header.adapter) {
        (CheckpointKind::Adapter, Some(info)) => info.clone(),
        _ => return Err(Error::format(path, "expected an adapter checkpoint")),
    };
    let actual = base_checksum(model)?;
    if actual != info.base_sha256 {
        return Err(Error::format(
            path,
            format!("adapter was trained on base {}, model is {actual}", info.base_sha256),
        ));
    }
    let mut m = model.clone();
    let mut head = PrognosisHead::zeroed(m.cfg.backbone.dense_channels(), info.head_hidden, info.bins.n_bins());
    if info.input_shift.len() != head.input_shift.len() || info.input_scale.len() != head.input_scale.len() {
        return Err(Error::format(path, "risk-head standardisation does not match the model width"));
    }
    head.input_shift = info.input_shift.clone();
    head.input_scale = info.input_scale.clone();
    m.prognosis = Some(head);
    for name in &info.layers {
        let l = m
            .linear_layer_mut(name)
            .ok_or_else(|| Error::format(path, format!("unknown adapted layer {name}")))?;
        l.lora = Some(LoraAdapter {
            rank: info.lora.rank,
            alpha: info.lora.alpha,
            a: Param::zeros(&[info.lora.rank, l.fan_in]),
            b: Param::zeros(&[l.fan_out, info.lora.rank]),
        });
    }
    fill(path, &mut m, &header.params, payload, is_adapter_param)?;
    m.set_trainable(false);
    m.visit_params("", &mut |n: &str, p: &mut Param<f32>| p.trainable = is_adapter_param(n));
    *model = m;
    Ok(info.bins)
}
