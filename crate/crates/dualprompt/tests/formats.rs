use std::fs;
use std::path::Path;

use dualprompt::checkpoint::{base_checksum, encode_base, load_adapter, load_base, save_adapter, save_base};
use dualprompt::volume_io::{load_mask, load_volume, save_mask, save_volume};
use dualprompt::Error;
use dualprompt_core::adaptation::{prepare_prognosis, PrognosisConfig};
use dualprompt_core::metrics::TimeBins;
use dualprompt_core::model::{DualPromptModel, ModelConfig};
use dualprompt_core::tensor::Dims;
use dualprompt_core::volume::{Mask, Modality, Volume};
use proptest::prelude::*;
use tempfile::tempdir;

fn small_model(seed: u64) -> DualPromptModel<f32> {
    let mut cfg = ModelConfig::default();
    cfg.backbone.patch = Dims::cube(8);
    DualPromptModel::new(cfg, seed).unwrap()
}

fn tiny_volume(n: usize) -> Volume {
    Volume {
        data: (0..8).map(|i| i as f32 * 0.5 - 1.0).collect::<Vec<_>>()[..n].to_vec(),
        dims: Dims([2, 2, 2]),
        spacing: [1.0, 1.5, 2.0],
        modality: Modality::Ct,
        region: "thorax".into(),
        id: "s0".into(),
    }
}

fn rewrite_json(path: &Path, edit: impl FnOnce(&mut serde_json::Value)) {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    edit(&mut v);
    fs::write(path, v.to_string()).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn volume_round_trip_is_bit_exact(
        dims in prop::array::uniform3(1usize..6),
        spacing in prop::array::uniform3(0.1f64..5.0),
        bits in prop::collection::vec(any::<u32>(), 125),
        m in 0usize..3,
    ) {
        let d = Dims(dims);
        let v = Volume {
            // Arbitrary bit patterns, including NaN payloads and subnormals.
            data: bits[..d.len()].iter().map(|&b| f32::from_bits(b)).collect(),
            dims: d,
            spacing,
            modality: Modality::ALL[m],
            region: "pelvis".into(),
            id: "x".into(),
        };
        let dir = tempdir().unwrap();
        let p = dir.path().join("v.json");
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        prop_assert_eq!(back.dims, v.dims);
        prop_assert_eq!(back.spacing, v.spacing);
        prop_assert_eq!(back.modality, v.modality);
        prop_assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn mask_round_trip_is_exact(dims in prop::array::uniform3(1usize..6), bits in prop::collection::vec(0u8..2, 125)) {
        let d = Dims(dims);
        let m = Mask { data: bits[..d.len()].to_vec(), dims: d, organ: "liver".into(), id: "x".into() };
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_mask(&m, &p).unwrap();
        prop_assert_eq!(load_mask(&p).unwrap(), m);
    }
}

#[test]
fn short_payload_is_rejected() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("v.json");
    save_volume(&tiny_volume(8), &p).unwrap();
    let raw = p.with_extension("raw");
    let bytes = fs::read(&raw).unwrap();
    fs::write(&raw, &bytes[..7 * 4]).unwrap();
    assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
}

#[test]
fn unknown_modality_is_rejected() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("v.json");
    save_volume(&tiny_volume(8), &p).unwrap();
    rewrite_json(&p, |v| v["modality"] = "xr".into());
    assert!(matches!(load_volume(&p), Err(Error::Format { .. })));
}

#[test]
fn malformed_headers_are_rejected() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("v.json");
    save_volume(&tiny_volume(8), &p).unwrap();
    rewrite_json(&p, |v| v["dims"] = serde_json::json!([2, 2]));
    assert!(load_volume(&p).is_err());
    fs::write(&p, "{ not json").unwrap();
    assert!(load_volume(&p).is_err());
    assert!(matches!(load_volume(dir.path().join("missing.json")), Err(Error::Io { .. })));
}

#[test]
fn base_checkpoint_round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("base.ckpt");
    let model = small_model(7);
    save_base(&model, &p).unwrap();
    let back = load_base(&p).unwrap();
    assert_eq!(back.cfg, model.cfg);
    assert_eq!(encode_base(&back).unwrap(), encode_base(&model).unwrap());
    assert_eq!(fs::read(&p).unwrap(), encode_base(&model).unwrap());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("base.ckpt");
    save_base(&small_model(1), &p).unwrap();
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_base(&p), Err(Error::Format { .. })));
    fs::write(&p, b"NOTACKPT").unwrap();
    assert!(load_base(&p).is_err());
}

#[test]
fn adapter_round_trip_and_checksum() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("adapter.ckpt");
    let base = small_model(3);
    let mut tuned = base.clone();
    let cfg = PrognosisConfig::default();
    prepare_prognosis(&mut tuned, &cfg).unwrap();
    let width = tuned.cfg.backbone.dense_channels();
    let rows: Vec<Vec<f64>> = (0..3).map(|r| (0..width).map(|c| (r * c) as f64 * 0.1 + 0.3).collect()).collect();
    tuned.prognosis.as_mut().unwrap().standardize_inputs(&rows).unwrap();
    let bins = TimeBins::equal_frequency(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], cfg.bins).unwrap();
    save_adapter(&tuned, &cfg.lora, &bins, &p).unwrap();
    // The base bytes are unchanged by attaching adapters.
    assert_eq!(base_checksum(&tuned).unwrap(), base_checksum(&base).unwrap());

    let mut loaded = base.clone();
    assert_eq!(load_adapter(&mut loaded, &p).unwrap(), bins);
    let head_a = tuned.prognosis.as_ref().unwrap();
    let head_b = loaded.prognosis.as_ref().unwrap();
    assert_eq!(head_a, head_b);

    let mut other = small_model(4);
    assert!(matches!(load_adapter(&mut other, &p), Err(Error::Format { .. })));
    assert!(other.prognosis.is_none());
    assert!(load_base(&p).is_err());
}
