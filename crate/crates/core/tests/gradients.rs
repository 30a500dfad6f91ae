use dualprompt_core::backbone::BackboneConfig;
use dualprompt_core::gradcheck::{check, numeric_gradient, GradSample};
use dualprompt_core::head::{head_backward, head_logits, spread_pooled_grad, HeadConfig, PredMlp};
use dualprompt_core::metrics::{
    deephit_loss, deephit_loss_grad, seg_loss, seg_loss_grad, seg_loss_logits_grad, softmax_rows,
    softmax_rows_backward, DeepHitConfig, SurvivalRecord, TimeBins,
};
use dualprompt_core::model::{DualPromptModel, ModelConfig, OrganTarget};
use dualprompt_core::real::sigmoid;
use dualprompt_core::{Dims, FeatureMap};
use dualprompt_core::volume::Modality;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

fn assert_close(samples: &[GradSample]) {
    for s in samples {
        assert!(
            s.rel_error(1e-6) < TOL,
            "{}[{}]: analytic {} numeric {}",
            s.param,
            s.index,
            s.analytic,
            s.numeric
        );
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            levels: 2,
            base_channels: 2,
            patch: Dims::cube(4),
            norm_groups: 4,
            text_dim: 6,
            film_hidden: 5,
            residual_film: true,
        },
        head_hidden: 3,
        pred_dim: 5,
        text_vocab: 64,
        text_seed: 9,
    }
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, d: Dims) -> FeatureMap<f64> {
    FeatureMap::from_vec(c, d, (0..c * d.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

#[test]
fn film_mlp_and_backbone_gradients() {
    let cfg = tiny_config();
    let mut model = DualPromptModel::<f64>::new(cfg.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_map(&mut rng, 1, cfg.backbone.patch);
    let e = model.embed("a computed tomography of abdomen").unwrap();
    let r_dec = random_map(&mut rng, 2, cfg.backbone.patch);
    let r_dense = random_map(&mut rng, 4, Dims::cube(2));

    let loss = |m: &DualPromptModel<f64>| {
        let out = m.backbone.forward(&x, Modality::Ct, &m.film.forward(&e)).unwrap();
        dot(&r_dec, &out.decoder) + dot(&r_dense, &out.dense)
    };
    let backward = |m: &mut DualPromptModel<f64>| {
        let (film, fc) = m.film.forward_cached(&e);
        let (_, cache) = m.backbone.forward_cached(&x, Modality::Ct, &film).unwrap();
        let dfilm = m.backbone.backward(&cache, &film, Some(&r_dec), Some(&r_dense));
        m.film.backward(&fc, &dfilm);
    };
    let picks = [
        ("film.trunk1.weight", 0),
        ("film.trunk1.weight", 17),
        ("film.trunk2.bias", 2),
        ("film.head0.weight", 3),
        ("film.head1.bias", 1),
        ("film.head2.weight", 9),
        ("backbone.stem.ct.conv1.weight", 5),
        ("backbone.stem.ct.conv2.weight", 40),
        ("backbone.stem.ct.gn2.weight", 1),
        ("backbone.down0.conv1.weight", 13),
        ("backbone.down0.conv2.weight", 70),
        ("backbone.pool0.weight", 7),
        ("backbone.pool0.bias", 2),
        ("backbone.bottleneck.conv1.weight", 100),
        ("backbone.bottleneck.gn1.bias", 3),
        ("backbone.up0.conv1.weight", 150),
        ("backbone.up0.conv2.weight", 20),
        ("backbone.up0.gn2.weight", 0),
    ];
    assert_close(&check(&mut model, backward, loss, &picks, STEP));
}

#[test]
fn unused_stems_get_no_gradient() {
    let cfg = tiny_config();
    let mut model = DualPromptModel::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_map(&mut rng, 1, cfg.backbone.patch);
    let e = model.embed("a positron emission tomography of thorax").unwrap();
    let t = OrganTarget {
        e_t2: model.embed("a positron emission tomography of heart").unwrap(),
        mask: (0..64).map(|i| (i % 3 == 0) as u8).collect(),
    };
    model.accumulate_sample(&x, Modality::Pet, &e, &[t], 1.0).unwrap();
    assert!(model.backbone.stems[Modality::Ct.index()].conv1.weight.grad.iter().all(|&g| g == 0.0));
    assert!(model.backbone.stems[Modality::Pet.index()].conv1.weight.grad.iter().any(|&g| g != 0.0));
}

#[test]
fn pred_mlp_and_head_gradients() {
    let hc = HeadConfig {
        decoder_channels: 2,
        hidden: 3,
        dense_channels: 4,
        text_dim: 6,
        embed_dim: 5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut mlp = PredMlp::<f64>::new(hc, &mut rng);
    let f = random_map(&mut rng, 2, Dims::cube(2));
    let dense = random_map(&mut rng, 4, Dims::cube(1));
    let e: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let gt: Vec<u8> = vec![1, 0, 0, 1, 1, 0, 1, 0];

    let loss = |m: &PredMlp<f64>| {
        let (_, theta) = m.forward(&e, &dense).unwrap();
        let (z, _) = head_logits(&f, &theta).unwrap();
        let p: Vec<f64> = z.into_iter().map(sigmoid).collect();
        seg_loss(&p, &gt).unwrap()
    };
    let backward = |m: &mut PredMlp<f64>| {
        let (_, theta, cache) = m.forward_cached(&e, &dense).unwrap();
        let (z, hcache) = head_logits(&f, &theta).unwrap();
        let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
        let (_, dp) = seg_loss_grad(&p, &gt).unwrap();
        let dz: Vec<f64> = dp.iter().zip(&p).map(|(g, q)| g * q * (1.0 - q)).collect();
        let (_, dtheta) = head_backward(&f, &theta, &hcache, &dz);
        m.backward(&cache, &dtheta);
    };
    let picks = [
        ("fc1.weight", 0),
        ("fc1.weight", 33),
        ("fc1.bias", 4),
        ("fc2.weight", 7),
        ("fc2.bias", 1),
        ("proj.weight", 0),
        ("proj.weight", 60),
        ("proj.bias", 5),
        ("proj.bias", 24),
    ];
    assert_close(&check(&mut mlp, backward, loss, &picks, STEP));

    // Input gradients: decoder features and (through pooling) the bottleneck.
    let (_, theta, cache) = mlp.forward_cached(&e, &dense).unwrap();
    let (z, hcache) = head_logits(&f, &theta).unwrap();
    let (_, dz) = seg_loss_logits_grad(&z, &gt).unwrap();
    let (df, _) = head_backward(&f, &theta, &hcache, &dz);
    let num = numeric_gradient(&f.data, STEP, |v| {
        let fm = FeatureMap::from_vec(2, f.dims, v.to_vec()).unwrap();
        let (z, _) = head_logits(&fm, &theta).unwrap();
        seg_loss_logits_grad(&z, &gt).unwrap().0
    });
    for (a, n) in df.data.iter().zip(&num) {
        assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-6) < TOL, "{a} vs {n}");
    }
    let (_, dtheta) = head_backward(&f, &theta, &hcache, &dz);
    let mut m2 = mlp.clone();
    let d_pooled = m2.backward(&cache, &dtheta);
    let d_dense = spread_pooled_grad(&d_pooled, &dense);
    let num = numeric_gradient(&dense.data, STEP, |v| {
        let dm = FeatureMap::from_vec(4, dense.dims, v.to_vec()).unwrap();
        let (_, th) = mlp.forward(&e, &dm).unwrap();
        let (z, _) = head_logits(&f, &th).unwrap();
        seg_loss_logits_grad(&z, &gt).unwrap().0
    });
    for (a, n) in d_dense.data.iter().zip(&num) {
        assert!((a - n).abs() / a.abs().max(n.abs()).max(1e-6) < TOL, "{a} vs {n}");
    }
}

#[test]
fn end_to_end_sample_gradients() {
    let cfg = tiny_config();
    let mut model = DualPromptModel::<f64>::new(cfg.clone(), 31).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x = random_map(&mut rng, 1, cfg.backbone.patch);
    let e1 = model.embed("a magnetic resonance imaging of abdomen").unwrap();
    let targets: Vec<OrganTarget<f64>> = ["liver", "spleen"]
        .iter()
        .map(|o| OrganTarget {
            e_t2: model.embed(&format!("a magnetic resonance imaging of {o}")).unwrap(),
            mask: (0..64).map(|_| rng.random_bool(0.3) as u8).collect(),
        })
        .collect();
    let loss = |m: &DualPromptModel<f64>| {
        let out = m.backbone.forward(&x, Modality::Mr, &m.film.forward(&e1)).unwrap();
        targets
            .iter()
            .map(|t| {
                let (_, th) = m.pred.forward(&t.e_t2, &out.dense).unwrap();
                let (z, _) = head_logits(&out.decoder, &th).unwrap();
                seg_loss_logits_grad(&z, &t.mask).unwrap().0
            })
            .sum::<f64>()
            / targets.len() as f64
    };
    let backward = |m: &mut DualPromptModel<f64>| {
        m.accumulate_sample(&x, Modality::Mr, &e1, &targets, 1.0).unwrap();
    };
    let picks = [
        ("film.trunk1.weight", 3),
        ("film.head1.weight", 11),
        ("backbone.stem.mr.conv1.weight", 2),
        ("backbone.stem.mr.conv1.weight", 30),
        ("backbone.stem.mr.conv2.weight", 3),
        ("backbone.stem.mr.gn1.weight", 1),
        ("backbone.down0.conv1.weight", 30),
        ("backbone.bottleneck.conv2.weight", 77),
        ("backbone.up0.conv1.weight", 99),
        ("pred.fc1.weight", 12),
        ("pred.proj.weight", 40),
        ("pred.proj.bias", 0),
    ];
    // The full composition has ReLU kinks (mostly in the generated head)
    // within 1e-4 of some stem weights at this probe point, so the whole
    // chain is checked with a smaller step.
    assert_close(&check(&mut model, backward, loss, &picks, 1e-5));
}

#[test]
fn seg_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..5 {
        let p: Vec<f64> = (0..27).map(|_| rng.random_range(0.02..0.98)).collect();
        let gt: Vec<u8> = (0..27).map(|_| rng.random_bool(0.4) as u8).collect();
        let (_, g) = seg_loss_grad(&p, &gt).unwrap();
        let n = numeric_gradient(&p, STEP, |v| seg_loss(v, &gt).unwrap());
        for (a, b) in g.iter().zip(&n) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-6) < TOL);
        }
        let z: Vec<f64> = (0..27).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (_, g) = seg_loss_logits_grad(&z, &gt).unwrap();
        let n = numeric_gradient(&z, STEP, |v| seg_loss_logits_grad(v, &gt).unwrap().0);
        for (a, b) in g.iter().zip(&n) {
            assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-6) < TOL);
        }
    }
}

#[test]
fn deephit_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let records: Vec<SurvivalRecord> = (0..6)
        .map(|i| SurvivalRecord {
            subject_id: format!("s{i}"),
            time: rng.random_range(0.5..20.0),
            event: rng.random_bool(0.7),
        })
        .collect();
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let bins = TimeBins::equal_frequency(&times, 4).unwrap();
    let cfg = DeepHitConfig::default();
    let logits: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |z: &[f64]| deephit_loss(&softmax_rows(z, 4), &records, &bins, cfg).unwrap();
    let probs = softmax_rows(&logits, 4);
    let (_, dp) = deephit_loss_grad(&probs, &records, &bins, cfg).unwrap();
    let dz = softmax_rows_backward(&probs, &dp, 4);
    let n = numeric_gradient(&logits, STEP, f);
    for (a, b) in dz.iter().zip(&n) {
        assert!((a - b).abs() / a.abs().max(b.abs()).max(1e-6) < TOL, "{a} vs {b}");
    }
    for row in probs.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
    }
}
