use aide_core::data::{synth_image, Artifact, Label, SynthSpec};
use aide_core::model::gradsuite::tiny_config;
use aide_core::model::pipeline::patch_encoder_forward;
use aide_core::model::*;
use aide_core::nn::{sigmoid, Tensor};
use aide_core::{Error, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noisy(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |x, y| {
        let b = ((x * 3 + y * 7) % 180) as u8;
        [b.wrapping_add(rng.random_range(0..50)), rng.random(), b / 2 + rng.random_range(0..60)]
    })
}

fn params(cfg: &AideConfig, sdim: Option<usize>, seed: u64) -> ModelParams {
    ModelParams::init(
        cfg.encoder_dim,
        cfg.semantic_dim,
        cfg.fusion_hidden,
        sdim,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

fn tiny() -> AideConfig {
    tiny_config(Ablation::Full, SemanticSource::TinyEncoder)
}

#[test]
fn patch_branch_shapes() {
    let cfg = tiny();
    let p = params(&cfg, None, 1);
    for (w, h) in [(32, 32), (48, 32), (70, 41)] {
        let (a, b) = encode_patch_branch(&noisy(w, h, 3), &cfg, &p.f1, &p.f2).unwrap();
        assert_eq!(a.shape(), &[cfg.encoder_dim]);
        assert_eq!(b.shape(), &[cfg.encoder_dim]);
    }
}

#[test]
fn too_few_patches_propagates() {
    let cfg = tiny();
    let p = params(&cfg, None, 1);
    let err = encode_patch_branch(&noisy(32, 16, 3), &cfg, &p.f1, &p.f2).unwrap_err();
    assert!(matches!(err, Error::InsufficientPatches { available: 2, required: 4 }));
}

#[test]
fn constant_image_tie_break() {
    let cfg = tiny();
    let img = RgbImage::filled(64, 48, [90, 120, 30]);
    let pre = Preprocessor::new(&cfg).unwrap();
    let (_, sel) = pre.select(&img).unwrap();
    assert!(sel.grades.iter().all(|&g| g == sel.grades[0]));
    assert_eq!(sel.max_indices, vec![0, 1]);
    assert_eq!(sel.min_indices, vec![0, 1]);
    let p = params(&cfg, None, 5);
    let first = encode_patch_branch(&img, &cfg, &p.f1, &p.f2).unwrap();
    let second = encode_patch_branch(&img, &cfg, &params(&cfg, None, 5).f1, &p.f2).unwrap();
    assert_eq!(first, second);
}

#[test]
fn single_patch_selection_skips_mean() {
    let cfg = AideConfig {
        k_select: 1,
        ..tiny()
    };
    let img = noisy(32, 16, 8);
    let p = params(&cfg, None, 2);
    let (f_max, f_min) = encode_patch_branch(&img, &cfg, &p.f1, &p.f2).unwrap();
    let pre = Preprocessor::new(&cfg).unwrap();
    let (patches, sel) = pre.select(&img).unwrap();
    let direct = |i: usize, e: &PatchEncoder<_>| patch_encoder_forward(e, &pre.patch_input(&patches[i].image).unwrap()).unwrap();
    assert_eq!(f_max, direct(sel.max_indices[0], &p.f1));
    assert_eq!(f_min, direct(sel.min_indices[0], &p.f2));
}

#[test]
fn embedded_identity_projection() {
    let cfg = AideConfig {
        semantic_dim: 4,
        ..tiny_config(Ablation::Full, SemanticSource::EmbeddedTable)
    };
    let mut p = params(&cfg, Some(4), 3);
    let mut eye = vec![0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    p.semantic.g.w.value = Tensor::new(vec![4, 4], eye).unwrap();
    let u = vec![0.5f32, -1.25, 3.0, 0.0];
    let mut table = EmbeddingTable::new(4);
    table.insert("a/b.png", u.clone()).unwrap();
    let f_s = encode_semantic(None, "a/b.png", &cfg, &p.semantic, Some(&table)).unwrap();
    let expect: Vec<f64> = u.iter().map(|&x| f64::from(x)).collect();
    assert_eq!(f_s.data(), expect.as_slice());

    let err = encode_semantic(None, "missing", &cfg, &p.semantic, Some(&table)).unwrap_err();
    assert!(matches!(err, Error::UnknownId(_)));
    let mut wide = EmbeddingTable::new(5);
    wide.insert("a/b.png", vec![0.0; 5]).unwrap();
    assert!(matches!(
        encode_semantic(None, "a/b.png", &cfg, &p.semantic, Some(&wide)),
        Err(Error::Config(_))
    ));
}

#[test]
fn semantic_shape_and_constant_commutation() {
    let cfg = tiny();
    let p = params(&cfg, None, 4);
    for (w, h) in [(40, 40), (33, 57)] {
        let f = encode_semantic(Some(&noisy(w, h, 1)), "x", &cfg, &p.semantic, None).unwrap();
        assert_eq!(f.shape(), &[cfg.semantic_dim]);
    }
    // Zero conv kernels make the feature map constant (ReLU of the bias), so
    // the pooled projection is the projection of that constant vector.
    let mut sem = p.semantic.clone();
    let enc = sem.encoder.as_mut().unwrap();
    for w in [&mut enc.conv1_w, &mut enc.conv2_w, &mut enc.conv3_w] {
        w.value.fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for b in enc.conv3_b.value.data_mut() {
        *b = rng.random_range(-1.0..1.0);
    }
    let v: Vec<f64> = enc.conv3_b.value.data().iter().map(|&b| b.max(0.0)).collect();
    let f = encode_semantic(Some(&RgbImage::filled(30, 30, [7, 7, 7])), "x", &cfg, &sem, None).unwrap();
    let g = &sem.g;
    for (o, &fo) in f.data().iter().enumerate() {
        let row = &g.w.value.data()[o * v.len()..(o + 1) * v.len()];
        let direct = g.b.value.data()[o] + row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        assert!((fo - direct).abs() < 1e-9);
    }
}

#[test]
fn fusion_examples() {
    let cfg = tiny();
    let p = params(&cfg, None, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vec = |n: usize, rng: &mut ChaCha8Rng| Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let u = vec(cfg.encoder_dim, &mut rng);
    let s = vec(cfg.semantic_dim, &mut rng);
    let a = vec(cfg.encoder_dim, &mut rng);
    // F_max = F_min = u behaves like a single branch carrying u.
    let both = fuse_and_score(&u, &u, &s, &p.fusion, Ablation::Full).unwrap();
    let only = fuse_and_score(&u, &a, &s, &p.fusion, Ablation::HPlusSfe).unwrap();
    assert!((both - only).abs() < 1e-12);
    // Averaging is symmetric in the two branches.
    let ab = fuse_and_score(&a, &u, &s, &p.fusion, Ablation::Full).unwrap();
    let ba = fuse_and_score(&u, &a, &s, &p.fusion, Ablation::Full).unwrap();
    assert!((ab - ba).abs() < 1e-12);

    let mut zero = p.fusion.clone();
    for t in [&mut zero.hidden.w, &mut zero.hidden.b, &mut zero.out.w] {
        t.value.fill(0.0);
    }
    zero.out.b.value.fill(-0.375);
    for ablation in Ablation::ALL {
        assert_eq!(fuse_and_score(&a, &u, &s, &zero, ablation).unwrap(), -0.375);
    }
    let short = vec(cfg.encoder_dim - 1, &mut rng);
    assert!(matches!(fuse_and_score(&short, &short, &s, &p.fusion, Ablation::Full), Err(Error::Argument(_))));
}

#[test]
fn sfe_only_ignores_patch_content() {
    let cfg = tiny_config(Ablation::SfeOnly, SemanticSource::TinyEncoder);
    let ckpt = init_checkpoint(&cfg, None).unwrap();
    // Prepared under the full model so patch tensors are present.
    let pre = Preprocessor::new(&tiny()).unwrap();
    let a = pre.prepare(&noisy(48, 48, 1), "x", None).unwrap();
    assert!(!a.max_inputs.is_empty() && !a.min_inputs.is_empty());
    let base = ckpt.logit(&a).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let mut b = a.clone();
        for t in b.max_inputs.iter_mut().chain(b.min_inputs.iter_mut()) {
            for v in t.data_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        assert_eq!(ckpt.logit(&b).unwrap(), base);
    }
    let full = init_checkpoint(&tiny(), None).unwrap();
    let mut b = a.clone();
    b.max_inputs[0].fill(0.5);
    assert_ne!(full.logit(&b).unwrap(), full.logit(&a).unwrap());
}

#[test]
fn probability_range_and_determinism() {
    for ablation in Ablation::ALL {
        let cfg = tiny_config(ablation, SemanticSource::TinyEncoder);
        let ckpt = init_checkpoint(&cfg, None).unwrap();
        for seed in 0..4 {
            let img = noisy(48, 40, seed);
            let p = ckpt.score(&img, "x", None).unwrap();
            assert!(p > 0.0 && p < 1.0);
            let again = init_checkpoint(&cfg, None).unwrap().score(&img, "x", None).unwrap();
            assert_eq!(p.to_bits(), again.to_bits());
            let d = ckpt.diagnose(&img, "x", None).unwrap();
            assert_eq!(d.probability.to_bits(), p.to_bits());
            assert_eq!(sigmoid(d.logit), d.probability);
        }
    }
}

fn corpus(count: usize, size: usize, artifact: Artifact, seed: u64) -> Vec<TrainExample> {
    let spec = SynthSpec {
        count_per_class: count,
        image_size: size,
        artifact,
        seed,
    };
    let mut out = Vec::new();
    for label in [Label::Real, Label::Fake] {
        for i in 0..count {
            out.push(TrainExample {
                id: format!("{}/{i}", label.name()),
                label,
                image: synth_image(&spec, label, i).unwrap().0,
            });
        }
    }
    out
}

fn train_cfg(epochs: usize) -> AideConfig {
    AideConfig {
        lr: 3e-3,
        batch_size: 4,
        epochs,
        augment_prob: 0.5,
        ..tiny()
    }
}

#[test]
fn two_epoch_rerun_bitwise() {
    let ex = corpus(4, 32, Artifact::Both, 3);
    let cfg = train_cfg(2);
    let a = train_examples(&ex, &cfg, None, &TrainOptions::default()).unwrap();
    let b = train_examples(&ex, &cfg, None, &TrainOptions::default()).unwrap();
    assert_eq!(a.epoch_losses.len(), 2);
    let bits = |c: &Checkpoint| c.epoch_losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(AideConfig::default().epochs, 5);
}

#[test]
fn loss_decreases_and_fakes_score_higher() {
    let ex = corpus(24, 32, Artifact::Both, 11);
    let cfg = AideConfig {
        augment_prob: 0.0,
        ..train_cfg(6)
    };
    let ckpt = train_examples(&ex, &cfg, None, &TrainOptions::default()).unwrap();
    let l = &ckpt.epoch_losses;
    assert!(l[l.len() - 1] < l[0], "losses {l:?}");
    let held = corpus(8, 32, Artifact::Both, 99);
    let mean = |label: Label| {
        let s: Vec<f64> = held
            .iter()
            .filter(|e| e.label == label)
            .map(|e| ckpt.score(&e.image, &e.id, None).unwrap())
            .collect();
        s.iter().sum::<f64>() / s.len() as f64
    };
    assert!(mean(Label::Fake) > mean(Label::Real));
}

#[test]
fn resume_matches_uninterrupted() {
    let ex = corpus(4, 32, Artifact::Both, 5);
    let cfg = AideConfig {
        seed: 7,
        ..train_cfg(3)
    };
    let full = train_examples(&ex, &cfg, None, &TrainOptions::default()).unwrap();
    let partial = train_examples(
        &ex,
        &cfg,
        None,
        &TrainOptions {
            stop_after: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(partial.epochs_completed, 1);
    let reloaded = Checkpoint::from_bytes(&partial.to_bytes().unwrap()).unwrap();
    let resumed = train_examples(
        &ex,
        &cfg,
        None,
        &TrainOptions {
            resume: Some(reloaded),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.to_bytes().unwrap(), full.to_bytes().unwrap());

    let other = AideConfig { lr: 1e-3, ..cfg.clone() };
    let err = train_examples(
        &ex,
        &other,
        None,
        &TrainOptions {
            resume: Some(partial),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn every_layer_participates() {
    let ex = corpus(4, 32, Artifact::Both, 21);
    let cfg = AideConfig {
        augment_prob: 0.0,
        ..train_cfg(2)
    };
    let base = train_examples(&ex, &cfg, None, &TrainOptions::default()).unwrap();
    let names: Vec<String> = base.params.named().into_iter().map(|(n, _)| n).collect();
    let mut layers: Vec<String> = names
        .iter()
        .map(|n| n.trim_end_matches("_w").trim_end_matches("_b").trim_end_matches(".w").trim_end_matches(".b").to_string())
        .collect();
    layers.dedup();
    assert_eq!(layers.len(), 14);
    for layer in layers {
        let frozen = train_examples(
            &ex,
            &cfg,
            None,
            &TrainOptions {
                frozen: vec![layer.clone()],
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(frozen.epoch_losses, base.epoch_losses, "{layer} does not affect the loss");
    }
}

#[test]
fn single_class_rejected() {
    let ex: Vec<TrainExample> = corpus(3, 32, Artifact::Spectral, 1)
        .into_iter()
        .filter(|e| e.label == Label::Real)
        .collect();
    let err = train_examples(&ex, &train_cfg(1), None, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Training(_)));
}

#[test]
fn embedded_table_training() {
    let ex = corpus(4, 32, Artifact::Spectral, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut table = EmbeddingTable::new(6);
    for e in &ex {
        let shift = if e.label == Label::Fake { 0.5 } else { -0.5 };
        table.insert(e.id.clone(), (0..6).map(|_| shift + rng.random_range(-0.2f32..0.2)).collect()).unwrap();
    }
    let cfg = AideConfig {
        semantic_source: SemanticSource::EmbeddedTable,
        ..train_cfg(2)
    };
    let ckpt = train_examples(&ex, &cfg, Some(&table), &TrainOptions::default()).unwrap();
    assert!(ckpt.params.semantic.encoder.is_none());
    assert_eq!(ckpt.semantic_input_dim, Some(6));
    assert_eq!(ckpt.params.semantic.g.w.value.shape(), &[cfg.semantic_dim, 6]);
    let p = ckpt.score(&ex[0].image, &ex[0].id, Some(&table)).unwrap();
    assert!(p > 0.0 && p < 1.0);
    assert!(matches!(ckpt.score(&ex[0].image, "nope", Some(&table)), Err(Error::UnknownId(_))));
    assert!(matches!(ckpt.score(&ex[0].image, &ex[0].id, None), Err(Error::Config(_))));
}
