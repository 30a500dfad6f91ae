use dualprompt_core::backbone::{Backbone, BackboneConfig, FilmParamSet};
use dualprompt_core::lora::{apply_lora, remove_lora, LoraConfig};
use dualprompt_core::metrics::{concordance_index, dice, softmax_rows, SurvivalRecord};
use dualprompt_core::model::{DualPromptModel, ModelConfig};
use dualprompt_core::optim::lr_at;
use dualprompt_core::prognosis::{late_fusion_maps, late_fusion_risks, risk_from_probs};
use dualprompt_core::tensor::{Dims, FeatureMap};
use dualprompt_core::volume::{clip_intensities, resample_isotropic, znormalize, Modality, Volume};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cohort() -> impl Strategy<Value = (Vec<f64>, Vec<SurvivalRecord>)> {
    (3usize..25).prop_flat_map(|n| {
        (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec((0.1f64..10.0, prop::bool::weighted(0.7)), n),
        )
            .prop_map(|(risks, outcomes)| {
                let recs = outcomes
                    .into_iter()
                    .enumerate()
                    .map(|(i, (time, event))| SurvivalRecord {
                        subject_id: format!("s{i}"),
                        time,
                        event,
                    })
                    .collect();
                (risks, recs)
            })
    })
}

fn volume(dims: [usize; 3], spacing: [f64; 3], modality: Modality, seed: u64) -> Volume {
    let d = Dims(dims);
    let mut x = seed | 1;
    let data = (0..d.len())
        .map(|_| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            (x % 4000) as f32 - 1500.0
        })
        .collect();
    Volume {
        data,
        dims: d,
        spacing,
        modality,
        region: "abdomen".into(),
        id: "p".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric_and_bounded(a in prop::collection::vec(0u8..2, 1..200), seed in any::<u64>()) {
        let mut x = seed | 1;
        let b: Vec<u8> = a.iter().map(|_| { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); (x >> 63) as u8 }).collect();
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn concordance_ignores_monotone_transforms((risks, recs) in cohort()) {
        if let Ok(ci) = concordance_index(&risks, &recs) {
            prop_assert!((0.0..=1.0).contains(&ci));
            let squashed: Vec<f64> = risks.iter().map(|r| (r * 0.7).tanh() * 3.0 + 1.0).collect();
            prop_assert_eq!(ci, concordance_index(&squashed, &recs).unwrap());
            let flipped: Vec<f64> = risks.iter().map(|r| -r).collect();
            prop_assert!((concordance_index(&flipped, &recs).unwrap() - (1.0 - ci)).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(z in prop::collection::vec(-30.0f64..30.0, 8..64)) {
        let n = z.len() / 8 * 8;
        let p = softmax_rows(&z[..n], 8);
        for row in p.chunks(8) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let r = risk_from_probs(row);
            prop_assert!((0.0..=7.0).contains(&r));
        }
    }

    #[test]
    fn lr_schedule_is_monotone(total in 1usize..500, lr in 1e-5f64..1.0) {
        prop_assert_eq!(lr_at(0, total, lr), lr);
        prop_assert_eq!(lr_at(total, total, lr), 0.0);
        let mut prev = lr;
        for s in 0..=total {
            let v = lr_at(s, total, lr);
            prop_assert!(v <= prev && v >= 0.0);
            prev = v;
        }
    }

    #[test]
    fn resample_dims_are_idempotent(
        dims in prop::array::uniform3(1usize..12),
        spacing in prop::array::uniform3(0.5f64..4.0),
        target in prop::array::uniform3(0.75f64..3.0),
    ) {
        let v = volume(dims, spacing, Modality::Mr, 3);
        let once = resample_isotropic(&v, target).unwrap();
        let twice = resample_isotropic(&once, target).unwrap();
        prop_assert_eq!(once.dims, twice.dims);
        prop_assert_eq!(once.spacing, target);
    }

    #[test]
    fn clip_then_normalise_is_finite_and_bounded(dims in prop::array::uniform3(1usize..9), seed in any::<u64>(), m in 0usize..3) {
        let modality = Modality::ALL[m];
        let v = volume(dims, [1.5; 3], modality, seed);
        let c = clip_intensities(&v);
        if modality == Modality::Ct {
            prop_assert!(c.data.iter().all(|&x| (-990.0..=500.0).contains(&x)));
        }
        let z = znormalize(&c);
        prop_assert!(z.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn late_fusion_is_permutation_invariant(a in prop::collection::vec(0.0f32..1.0, 5), b in prop::collection::vec(0.0f32..1.0, 5), r in prop::collection::vec(-3.0f64..3.0, 1..6)) {
        prop_assert_eq!(late_fusion_maps(&[&a, &b]).unwrap(), late_fusion_maps(&[&b, &a]).unwrap());
        let mut rev = r.clone();
        rev.reverse();
        prop_assert!((late_fusion_risks(&r).unwrap() - late_fusion_risks(&rev).unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn backbone_shape_law(levels in 1usize..4, base in 1usize..3, k in prop::array::uniform3(1usize..3), seed in any::<u64>()) {
        let f = 1usize << (levels - 1);
        let cfg = BackboneConfig {
            levels,
            base_channels: 2 * base,
            patch: Dims([f * k[0], f * k[1], f * k[2]]),
            norm_groups: 2,
            text_dim: 4,
            film_hidden: 4,
            residual_film: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Backbone::<f64>::new(&cfg, &mut rng).unwrap();
        let x = FeatureMap::from_vec(1, cfg.patch, (0..cfg.patch.len()).map(|i| (i % 5) as f64 - 2.0).collect()).unwrap();
        let mut bad = cfg.clone();
        bad.base_channels = 6;
        bad.norm_groups = 4;
        prop_assert!(Backbone::<f64>::new(&bad, &mut rng).is_err());
        let out = b.forward(&x, Modality::Pet, &FilmParamSet::identity(&cfg.film_widths())).unwrap();
        prop_assert_eq!(out.decoder.dims, cfg.patch);
        prop_assert_eq!(out.decoder.channels, cfg.decoder_channels());
        prop_assert_eq!(out.dense.dims, cfg.dense_dims());
        prop_assert_eq!(out.dense.channels, cfg.dense_channels());
        prop_assert!(out.decoder.is_finite());
    }

    #[test]
    fn fresh_adapters_are_bit_transparent(seed in any::<u64>(), prompt in "[a-z ]{1,30}") {
        prop_assume!(!prompt.trim().is_empty());
        let mut cfg = ModelConfig::default();
        cfg.backbone.patch = Dims::cube(8);
        let mut m = DualPromptModel::<f32>::new(cfg, seed).unwrap();
        let e = m.embed(&prompt).unwrap();
        let before = m.film.forward(&e).flatten();
        let names = m.linear_layer_names();
        let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
        apply_lora(&mut m, &refs, &LoraConfig { seed, ..LoraConfig::default() }).unwrap();
        let after = m.film.forward(&e).flatten();
        prop_assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
        remove_lora(&mut m);
        prop_assert!(m.film.trunk1.lora.is_none());
    }
}
