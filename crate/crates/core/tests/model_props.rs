use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tclp::model::*;
use tclp::numerics::{grad_check, GradCheckConfig, Graph, Tensor};
use tclp::toyworld::*;

fn small(kind: TowerKind) -> EncoderConfig {
    EncoderConfig { d_model: 16, d_embed: 8, n_blocks: 1, n_heads: 2, tower_kind: kind, ..Default::default() }
}

fn rows_close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn some_examples(m: usize, seed: u64) -> Dataset {
    generate_dataset(m, seed, &KindMix::uniform(), 32).unwrap()
}

#[test]
fn embeddings_are_unit_norm() {
    let ds = some_examples(24, 1);
    for kind in [TowerKind::Transformer, TowerKind::Mlp] {
        let m = DualEncoder::new(small(kind), 3).unwrap();
        let imgs: Vec<&Raster> = ds.examples.iter().map(|e| &e.pos.image).collect();
        let txts: Vec<&[u32]> = ds.examples.iter().map(|e| e.pos.caption.tokens.as_slice()).collect();
        for emb in [m.encode_images(&imgs).unwrap(), m.encode_texts(&txts).unwrap()] {
            assert_eq!(emb.shape(), &[24, 8]);
            for i in 0..emb.rows() {
                let n: f32 = emb.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((n - 1.0).abs() <= 1e-5, "{n}");
            }
        }
    }
}

#[test]
fn identical_inputs_give_identical_rows() {
    let ds = some_examples(3, 2);
    let m = DualEncoder::new(small(TowerKind::Transformer), 5).unwrap();
    let img = &ds.examples[0].pos.image;
    let e = m.encode_images(&[img, &ds.examples[1].pos.image, img]).unwrap();
    assert_eq!(e.row(0), e.row(2));
    let t = ds.examples[0].pos.caption.tokens.as_slice();
    let e = m.encode_texts(&[t, ds.examples[2].pos.caption.tokens.as_slice(), t]).unwrap();
    assert_eq!(e.row(0), e.row(2));
}

#[test]
fn pad_extension_does_not_change_text_embedding() {
    let m = DualEncoder::new(small(TowerKind::Transformer), 6).unwrap();
    let short = caption_of(&parse("a small red circle").unwrap()).tokens;
    let mut padded = short.clone();
    padded.extend([PAD_ID; 6]);
    let long = caption_of(&parse("a large blue square left of a small red circle").unwrap()).tokens;
    let a = m.encode_texts(&[&short]).unwrap();
    let b = m.encode_texts(&[&padded, &long]).unwrap();
    assert!(rows_close(a.row(0), b.row(0), 1e-6), "{:?} vs {:?}", a.row(0), b.row(0));
}

#[test]
fn permuting_batch_permutes_rows() {
    let ds = some_examples(4, 8);
    let m = DualEncoder::new(small(TowerKind::Transformer), 7).unwrap();
    let t: Vec<&[u32]> = ds.examples.iter().map(|e| e.pos.caption.tokens.as_slice()).collect();
    let fwd = m.encode_texts(&t).unwrap();
    let rev: Vec<&[u32]> = t.iter().rev().copied().collect();
    let bwd = m.encode_texts(&rev).unwrap();
    for i in 0..4 {
        assert!(rows_close(fwd.row(i), bwd.row(3 - i), 1e-6));
    }
}

#[test]
fn input_errors_name_the_problem() {
    let m = DualEncoder::new(small(TowerKind::Transformer), 7).unwrap();
    let img = Raster::filled(16, 16, [0, 0, 0]);
    let err = m.encode_images(&[&img]).unwrap_err().to_string();
    assert!(err.contains("32x32") && err.contains("16x16"), "{err}");
    assert!(m.encode_texts(&[&[1, 99]]).unwrap_err().to_string().contains("99"));
    assert!(m.encode_texts(&[&[1; 17]]).is_err());
    assert!(m.encode_texts(&[&[1, 0, 2]]).is_err());
}

#[test]
fn zero_projection_gives_flagged_zero_rows() {
    let mut m = DualEncoder::new(small(TowerKind::Transformer), 7).unwrap();
    m.param_mut("image.proj").unwrap().data_mut().fill(0.0);
    let img = Raster::filled(32, 32, [10, 20, 30]);
    let mut g = Graph::<f32>::new();
    let b = m.bind(&mut g, false).unwrap();
    let out = m.encode_images_on(&mut g, &b, &[&img]).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.degenerate_rows(), 1);
}

#[test]
fn similarity_examples() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let s = similarity_matrix(&a, &a, 1.0).unwrap();
    assert_eq!(s.data(), &[1.0, 0.0, 0.0, 1.0]);
    let h = Tensor::from_rows(&[vec![0.5f32.sqrt(), 0.5f32.sqrt()]]).unwrap();
    let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let c = similarity_matrix(&h, &x, 0.07).unwrap().data()[0];
    let cos = 0.5f32.sqrt();
    assert!((c - cos / 0.07).abs() < 1e-4);
    let half = Tensor::from_rows(&[vec![0.5, 0.75f32.sqrt()]]).unwrap();
    assert!((similarity_matrix(&half, &x, 0.07).unwrap().data()[0] - 7.142857).abs() < 1e-4);
    let wrong = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
    assert!(similarity_matrix(&a, &wrong, 1.0).is_err());
}

#[test]
fn checkpoint_file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = DualEncoder::new(small(TowerKind::Transformer), 9).unwrap();
    let meta = TrainMeta { step: 1, pairs_seen: 64, seed: 9, objective: "tripletclip".into() };
    save_checkpoint(&m, &meta, &path).unwrap();
    let (back, meta2) = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(meta2, meta);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(ModelError::Truncated(_))));
}

#[test]
fn shape_mismatch_on_load() {
    let m = DualEncoder::new(small(TowerKind::Transformer), 9).unwrap();
    let mut params = m.params().clone();
    params.insert("text.proj".into(), Tensor::zeros(&[3, 3]));
    assert!(matches!(
        DualEncoder::from_params(m.config().clone(), params),
        Err(ModelError::TensorShape { .. })
    ));
}

#[test]
fn freezing_flags_tensors() {
    let mut m = DualEncoder::new(small(TowerKind::Transformer), 9).unwrap();
    m.set_frozen(ParamGroup::Image, true);
    assert!(m.is_frozen(ParamGroup::Image));
    assert!(!m.is_frozen(ParamGroup::Text));
    assert!(!m.is_frozen(ParamGroup::Tau));
    assert!(m.params().iter().filter(|(k, _)| k.starts_with("image.")).all(|(_, t)| !t.requires_grad));
    m.set_frozen(ParamGroup::Image, false);
    assert!(!m.is_frozen(ParamGroup::Image));
}

#[test]
fn tau_initialization_and_clamp() {
    let mut m = DualEncoder::new(small(TowerKind::Transformer), 9).unwrap();
    assert!((m.tau() - 0.07).abs() < 1e-6);
    m.param_mut(TAU_PARAM).unwrap().data_mut()[0] = 9.0;
    m.clamp_tau();
    assert!((m.logit_scale() - 100.0).abs() < 1e-3);
    m.param_mut(TAU_PARAM).unwrap().data_mut()[0] = -3.0;
    m.clamp_tau();
    assert_eq!(m.logit_scale(), 1.0);
}

/// Full encoder stack against central differences in f64.
#[test]
fn encoder_gradients_match_finite_differences() {
    let cfg = EncoderConfig {
        image_hw: 16,
        patch_size: 8,
        d_model: 8,
        d_embed: 4,
        n_blocks: 1,
        n_heads: 2,
        mlp_ratio: 2,
        ..Default::default()
    };
    let m = DualEncoder::new(cfg, 12).unwrap();
    let ds = generate_dataset(3, 4, &KindMix::uniform(), 16).unwrap();
    let imgs: Vec<&Raster> = ds.examples.iter().map(|e| &e.pos.image).collect();
    let txts: Vec<&[u32]> = ds.examples.iter().map(|e| e.pos.caption.tokens.as_slice()).collect();
    let names: Vec<String> = m.params().keys().cloned().collect();
    let params: Vec<Tensor<f64>> = m.params().values().map(|t| t.cast::<f64>()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probe = random_unit_rows(&mut rng, 3, 4).cast::<f64>();
    let report = grad_check(
        |g, vars| {
            let b = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
            let zi = m.encode_images_on(g, &b, &imgs).unwrap();
            let zt = m.encode_texts_on(g, &b, &txts).unwrap();
            let w = g.constant(probe.clone())?;
            let s = g.add(zi, zt)?;
            let p = g.mul(s, w)?;
            let p = g.tanh(p)?;
            g.sum(p)
        },
        &params,
        GradCheckConfig::f64_default(),
    )
    .unwrap();
    assert!(report.passed, "worst {:?}", report.worst);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn similarity_transpose_is_exact(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, tau in 0.01f32..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_unit_rows(&mut rng, n, 5);
        let b = random_unit_rows(&mut rng, k, 5);
        let ab = similarity_matrix(&a, &b, tau).unwrap();
        let ba = similarity_matrix(&b, &a, tau).unwrap();
        for i in 0..n {
            for j in 0..k {
                prop_assert_eq!(ab.data()[i * k + j], ba.data()[j * n + i]);
            }
        }
    }

    #[test]
    fn random_models_emit_unit_rows(seed in any::<u64>(), data_seed in any::<u64>()) {
        let m = DualEncoder::new(small(TowerKind::Transformer), seed).unwrap();
        let ds = some_examples(4, data_seed);
        let imgs: Vec<&Raster> = ds.examples.iter().map(|e| &e.pos.image).collect();
        let e = m.encode_images(&imgs).unwrap();
        for i in 0..4 {
            let n: f32 = e.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            prop_assert!((n - 1.0).abs() <= 1e-5);
        }
    }
}
