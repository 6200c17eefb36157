mod common;

use std::collections::BTreeMap;

use common::oracles::{self, Rows};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tclp::eval::*;
use tclp::model::{random_unit_rows, DualEncoder, EncoderConfig};
use tclp::numerics::Tensor;
use tclp::toyworld::{generate_dataset, KindMix, PerturbationKind};

fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect()
}

/// Low-dimensional rows so near-ties and exact ties both occur.
fn coarse_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let data: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let r: Vec<f32> = (0..d).map(|_| rng.gen_range(-2i32..=2) as f32).collect();
            let norm = r.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm == 0.0 {
                let mut e = vec![0.0; d];
                e[0] = 1.0;
                e
            } else {
                r.iter().map(|v| v / norm).collect()
            }
        })
        .collect();
    Tensor::from_rows(&data).unwrap()
}

fn random_quads(seed: u64, n: usize) -> QuadEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = (0..n).map(|_| PerturbationKind::ALL[rng.gen_range(0..7)]).collect();
    QuadEmbeddings::new(
        coarse_rows(&mut rng, n, 3),
        coarse_rows(&mut rng, n, 3),
        coarse_rows(&mut rng, n, 3),
        coarse_rows(&mut rng, n, 3),
        kinds,
    )
    .unwrap()
}

#[test]
fn winoground_example_and_tie_policy() {
    // Rows realising s(x,y)=0.9, s(x,y')=0.2, s(x',y)=0.1, s(x',y')=0.8 in the rule's ordering.
    let x = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let y = Tensor::from_rows(&[vec![0.9, (1.0f32 - 0.81).sqrt()]]).unwrap();
    let xn = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let yn = Tensor::from_rows(&[vec![0.2, (1.0f32 - 0.04).sqrt()]]).unwrap();
    let q = QuadEmbeddings::new(x, y, xn, yn, vec![PerturbationKind::ReplaceObject]).unwrap();
    let s = winoground_scores(&q).unwrap();
    assert_eq!((s.text, s.image, s.group), (1.0, 1.0, 1.0));
    assert!(winoground_scores(&random_quads(0, 1)).is_ok());
}

#[test]
fn group_never_exceeds_text_or_image() {
    for seed in 0..1000 {
        let s = winoground_scores(&random_quads(seed, 12)).unwrap();
        assert!(s.group <= s.text.min(s.image));
    }
}

#[test]
fn binary_accuracy_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_unit_rows(&mut rng, 6, 4);
    let kinds = vec![PerturbationKind::SwapObject; 6];
    assert_eq!(binary_comp_accuracy(&x, &x, &x, &kinds).unwrap().overall, 0.0);
    let orth: Vec<Vec<f32>> = (0..6).map(|_| vec![0.0, 0.0, 0.0, 0.0]).collect();
    let x = Tensor::from_rows(&(0..6).map(|i| {
        let mut r = vec![0.0; 4];
        r[i % 3] = 1.0;
        r
    }).collect::<Vec<_>>()).unwrap();
    let mut yn = orth.clone();
    for r in yn.iter_mut() {
        r[3] = 1.0;
    }
    let yn = Tensor::from_rows(&yn).unwrap();
    assert_eq!(binary_comp_accuracy(&x, &x, &yn, &kinds).unwrap().overall, 1.0);
}

#[test]
fn binary_accuracy_five_example_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, y, yn) = (coarse_rows(&mut rng, 5, 2), coarse_rows(&mut rng, 5, 2), coarse_rows(&mut rng, 5, 2));
    let kinds = vec![
        PerturbationKind::SwapObject,
        PerturbationKind::SwapObject,
        PerturbationKind::AddObject,
        PerturbationKind::ReplaceRelation,
        PerturbationKind::AddObject,
    ];
    let got = binary_comp_accuracy(&x, &y, &yn, &kinds).unwrap();
    let (xr, yr, ynr) = (rows(&x), rows(&y), rows(&yn));
    let mut per: BTreeMap<PerturbationKind, (f64, f64)> = BTreeMap::new();
    for i in 0..5 {
        let e = per.entry(kinds[i]).or_default();
        e.1 += 1.0;
        if oracles::dot(&xr[i], &yr[i]) > oracles::dot(&xr[i], &ynr[i]) {
            e.0 += 1.0;
        }
    }
    assert_eq!(got.by_kind.len(), 3);
    let mut sum = 0.0;
    for (k, (h, c)) in &per {
        assert_eq!(got.by_kind[k], h / c);
        sum += h / c;
    }
    assert_eq!(got.overall, sum / 3.0);
}

#[test]
fn binary_accuracy_invariant_to_positive_rescaling() {
    let q = random_quads(77, 20);
    let scale = |t: &Tensor| Tensor::new(t.shape(), t.data().iter().map(|v| v * 2.0).collect()).unwrap();
    let a = binary_comp_accuracy(&q.img_pos, &q.txt_pos, &q.txt_neg, &q.kinds).unwrap();
    let b = binary_comp_accuracy(&scale(&q.img_pos), &scale(&q.txt_pos), &scale(&q.txt_neg), &q.kinds).unwrap();
    assert_eq!(a, b);
}

#[test]
fn retrieval_identity_and_adversarial() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let e = random_unit_rows(&mut rng, 10, 16);
    let r = retrieval_at_k(&e, &e, &[1]).unwrap();
    assert_eq!((r.i2t[&1], r.t2i[&1]), (1.0, 1.0));
    // Each caption is closer to the next image than to its own: the partner ranks second.
    let n = 8;
    let img: Vec<Vec<f32>> = (0..n).map(|i| (0..n).map(|k| if k == i { 1.0 } else { 0.0 }).collect()).collect();
    let txt: Vec<Vec<f32>> = (0..n)
        .map(|j| {
            let mut r = vec![0.0f32; n];
            r[j] = 1.0;
            r[(j + 1) % n] = 1.2;
            let norm = (1.0f32 + 1.44).sqrt();
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let r = retrieval_at_k(&Tensor::from_rows(&img).unwrap(), &Tensor::from_rows(&txt).unwrap(), &[1, 5]).unwrap();
    assert_eq!((r.i2t[&1], r.i2t[&5], r.t2i[&1], r.t2i[&5]), (0.0, 1.0, 0.0, 1.0));
    assert!(retrieval_at_k(&e, &e, &[10]).is_err());
}

#[test]
fn zeroshot_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let classes = random_unit_rows(&mut rng, 10, 12);
    let labels: Vec<usize> = (0..10).collect();
    let z = zeroshot_classify(&classes, &classes, &labels).unwrap();
    assert_eq!((z.top1, z.top5), (1.0, Some(1.0)));
    // Distractor classes orthogonal to every image are never predicted.
    let img = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let cls = Tensor::from_rows(&[vec![0.9, 0.436, 0.0], vec![0.0, 0.0, 1.0], vec![0.436, 0.9, 0.0]]).unwrap();
    assert_eq!(zeroshot_classify(&img, &cls, &[0, 2]).unwrap().top1, 1.0);
    assert!(matches!(zeroshot_classify(&img, &cls, &[0, 3]), Err(EvalError::LabelOutOfRange { label: 3, .. })));
}

#[test]
fn selection_by_score_oracle() {
    let (kept, min_kept, max_dropped) = select_by_score(&[0.9, 0.5, 0.7], &[0, 1, 2], 2.0 / 3.0).unwrap();
    assert_eq!(kept, vec![0, 2]);
    assert_eq!((min_kept, max_dropped), (0.7, Some(0.5)));
    // Ties resolve toward the lower id.
    let (kept, _, _) = select_by_score(&[0.5, 0.5, 0.5, 0.1], &[3, 1, 2, 0], 0.5).unwrap();
    assert_eq!(kept, vec![1, 2]);
    let (kept, _, dropped) = select_by_score(&[0.2, 0.1], &[0, 1], 1.0).unwrap();
    assert_eq!((kept, dropped), (vec![0, 1], None));
    assert!(select_by_score(&[0.2], &[0], 0.0).is_err());
}

#[test]
fn filtering_a_dataset_is_deterministic_and_monotone() {
    let ds = generate_dataset(40, 2, &KindMix::uniform(), 32).unwrap();
    let cfg = EncoderConfig { d_model: 16, d_embed: 8, n_blocks: 1, n_heads: 2, ..Default::default() };
    let model = DualEncoder::new(cfg, 1).unwrap();
    let a = clip_score_filter(&ds, &model, 0.5).unwrap();
    let b = clip_score_filter(&ds, &model, 0.5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.kept.len(), 20);
    assert!(a.min_kept >= a.max_dropped.unwrap());
    assert!(a.kept.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(clip_score_filter(&ds, &model, 1.0).unwrap().kept, (0..40).collect::<Vec<_>>());
    assert!(clip_score_filter(&ds.positives_only(), &model, 0.5).is_err());
}

#[test]
fn histogram_extremes_and_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_unit_rows(&mut rng, 7, 5);
    let q = QuadEmbeddings::new(x.clone(), x.clone(), x.clone(), x.clone(), vec![PerturbationKind::SwapObject; 7])
        .unwrap();
    let h = similarity_histograms(&q, 50).unwrap();
    assert_eq!(h.image.counts[49], 7);
    assert_eq!(h.edges.len(), 51);
    let e0 = Tensor::from_rows(&vec![vec![1.0, 0.0]; 3]).unwrap();
    let e1 = Tensor::from_rows(&vec![vec![0.0, 1.0]; 3]).unwrap();
    let q = QuadEmbeddings::new(e0.clone(), e0, e1.clone(), e1, vec![PerturbationKind::SwapObject; 3]).unwrap();
    let h = similarity_histograms(&q, 50).unwrap();
    assert_eq!(h.image.counts[25], 3);
    assert_eq!(h.text.counts[25], 3);
    let q = random_quads(9, 20);
    let h = similarity_histograms(&q, 50).unwrap();
    let direct: f64 =
        (0..20).map(|i| oracles::dot(&rows(&q.img_pos)[i], &rows(&q.img_neg)[i])).sum::<f64>() / 20.0;
    assert!((h.image.mean - direct).abs() < 1e-6);
    assert_eq!(h.image.counts.iter().sum::<usize>(), 20);
}

#[test]
fn evaluation_report_is_consistent_and_repeatable() {
    let ds = generate_dataset(60, 5, &KindMix::uniform(), 32).unwrap();
    let cfg = EncoderConfig { d_model: 16, d_embed: 8, n_blocks: 1, n_heads: 2, ..Default::default() };
    let model = DualEncoder::new(cfg, 2).unwrap();
    let a = evaluate(&model, &ds, EvalMeta::default()).unwrap();
    let b = evaluate(&model, &ds, EvalMeta::default()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.group_score <= a.text_score.min(a.image_score));
    for v in [a.text_score, a.image_score, a.binary_acc_overall, a.zeroshot.top1] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(a.sim_hist_image.counts.iter().sum::<usize>(), 60);
    assert!(a.retrieval.i2t[&1] <= a.retrieval.i2t[&5] && a.retrieval.i2t[&5] <= a.retrieval.i2t[&10]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_match_brute_force_oracles(seed in any::<u64>()) {
        let n = 20;
        let q = random_quads(seed, n);
        let (x, y, xn, yn) = (rows(&q.img_pos), rows(&q.txt_pos), rows(&q.img_neg), rows(&q.txt_neg));

        let s = winoground_scores(&q).unwrap();
        let (t, i, g) = oracles::winoground(&x, &y, &xn, &yn);
        prop_assert_eq!((s.text, s.image, s.group), (t as f64 / 20.0, i as f64 / 20.0, g as f64 / 20.0));

        let ks = [1, 5, 10];
        let r = retrieval_at_k(&q.img_pos, &q.txt_pos, &ks).unwrap();
        let mut prev = 0.0;
        for k in ks {
            let (i2t, t2i) = oracles::recall_at(&x, &y, k);
            prop_assert_eq!((r.i2t[&k], r.t2i[&k]), (i2t, t2i));
            prop_assert!(r.i2t[&k] >= prev);
            prev = r.i2t[&k];
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = coarse_rows(&mut rng, 10, 3);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let z = zeroshot_classify(&q.img_pos, &classes, &labels).unwrap();
        let c = rows(&classes);
        prop_assert_eq!(z.top1, oracles::topk_hits(&x, &c, &labels, 1) as f64 / 20.0);
        prop_assert_eq!(z.top5, Some(oracles::topk_hits(&x, &c, &labels, 5) as f64 / 20.0));

        let b = binary_comp_accuracy(&q.img_pos, &q.txt_pos, &q.txt_neg, &q.kinds).unwrap();
        let mut per: BTreeMap<PerturbationKind, (usize, usize)> = BTreeMap::new();
        for k in 0..n {
            let e = per.entry(q.kinds[k]).or_default();
            e.1 += 1;
            e.0 += usize::from(oracles::dot(&x[k], &y[k]) > oracles::dot(&x[k], &yn[k]));
        }
        let overall = per.values().map(|&(h, c)| h as f64 / c as f64).sum::<f64>() / per.len() as f64;
        prop_assert_eq!(b.overall, overall);
    }
}
